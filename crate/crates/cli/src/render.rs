//! Mask visualizations written as binary PGM/PPM grids.

use std::path::Path;

use pmae_core::data::{ChannelStats, Dataset};
use pmae_core::masking::{
    patch_mask_to_pixel_indicator, sample_component_mask, sample_patch_mask, ComponentMask,
};
use pmae_core::objectives::pmae_pixel_target;
use pmae_core::pca::PcaBasis;
use pmae_core::pipeline::prepare_batch;
use pmae_core::{rng, Tensor};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Pixel,
    Component,
    PcBands,
}

/// Panels in normalized space; `panels[row][col]` is one `[H, W, C]` image.
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub panels: Vec<Vec<Vec<f64>>>,
}

/// Components split into thirds of cumulative variance, in eigenvalue order.
pub fn variance_bands(fractions: &[f64]) -> [Vec<usize>; 3] {
    let total: f64 = fractions.iter().sum();
    let mut bands: [Vec<usize>; 3] = Default::default();
    let mut before = 0.0;
    for (l, &f) in fractions.iter().enumerate() {
        let pos = if total > 0.0 { before / total } else { 1.0 };
        let band = if pos < 1.0 / 3.0 {
            0
        } else if pos < 2.0 / 3.0 {
            1
        } else {
            2
        };
        bands[band].push(l);
        before += f;
    }
    bands
}

fn rows(t: &Tensor, n: usize) -> Vec<Vec<f64>> {
    t.data()
        .chunks_exact(t.numel() / n)
        .map(<[f64]>::to_vec)
        .collect()
}

fn need_basis<'a>(basis: Option<&'a PcaBasis>, ds: &Dataset) -> Result<&'a PcaBasis, CliError> {
    let b = basis.ok_or_else(|| CliError::Usage("this mode needs --basis".into()))?;
    if b.dim() != ds.image_len() {
        return Err(CliError::Config(format!(
            "`basis`: dimension {} does not match image dimension {}",
            b.dim(),
            ds.image_len()
        )));
    }
    Ok(b)
}

/// Builds the grid for the first `count` training images.
#[allow(clippy::too_many_arguments)]
pub fn render(
    ds: &Dataset,
    stats: &ChannelStats,
    basis: Option<&PcaBasis>,
    mode: RenderMode,
    r: f64,
    seed: u64,
    count: usize,
    patch_px: usize,
) -> Result<Grid, CliError> {
    let n = count.min(ds.len());
    if n == 0 {
        return Err(CliError::Usage("nothing to render".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let x = prepare_batch(&mut rng::seeded(0), ds, &idx, stats, None)?;
    let flat = x.reshape(vec![n, ds.image_len()])?;
    let originals = rows(&x, n);
    let mut g = rng::stream(seed, &[0]);
    let mut panels: Vec<Vec<Vec<f64>>> = originals.iter().map(|o| vec![o.clone()]).collect();
    match mode {
        RenderMode::Pixel => {
            if patch_px == 0
                || !ds.height.is_multiple_of(patch_px)
                || !ds.width.is_multiple_of(patch_px)
            {
                return Err(CliError::Config(format!(
                    "`patch_px`: {patch_px} does not divide {}x{} images",
                    ds.height, ds.width
                )));
            }
            let (gh, gw) = (ds.height / patch_px, ds.width / patch_px);
            for (row, orig) in panels.iter_mut().zip(&originals) {
                let mask = sample_patch_mask(&mut g, gh, gw, r)?;
                let keep = patch_mask_to_pixel_indicator(
                    &mask,
                    ds.height,
                    ds.width,
                    patch_px,
                    ds.channels,
                )?;
                let input = orig.iter().zip(keep.data()).map(|(v, k)| v * k).collect();
                let target = orig
                    .iter()
                    .zip(keep.data())
                    .map(|(v, k)| v * (1.0 - k))
                    .collect();
                row.push(input);
                row.push(target);
            }
        }
        RenderMode::Component => {
            let b = need_basis(basis, ds)?;
            let mask = sample_component_mask(&mut g, b.variance_fractions(), r)?;
            let input = b.masked_reconstruction(&flat, &mask)?;
            let target = pmae_pixel_target(&x, &mask, b)?;
            for ((row, i), t) in panels.iter_mut().zip(rows(&input, n)).zip(rows(&target, n)) {
                row.push(i);
                row.push(t);
            }
        }
        RenderMode::PcBands => {
            let b = need_basis(basis, ds)?;
            for band in variance_bands(b.variance_fractions()) {
                let mut masked = vec![true; b.dim()];
                for l in band {
                    masked[l] = false;
                }
                let mask = ComponentMask::from_masked(masked, b.variance_fractions(), 0.0);
                let rec = b.masked_reconstruction(&flat, &mask)?;
                for (row, p) in panels.iter_mut().zip(rows(&rec, n)) {
                    row.push(p);
                }
            }
        }
    }
    Ok(Grid {
        height: ds.height,
        width: ds.width,
        channels: ds.channels,
        panels,
    })
}

impl Grid {
    /// Binary PGM (1 channel) or PPM (3 channels) bytes, denormalized and clamped.
    pub fn to_pnm(&self, stats: &ChannelStats) -> Result<Vec<u8>, CliError> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(CliError::Usage(format!(
                    "cannot write {c}-channel images as PGM/PPM"
                )))
            }
        };
        let cols = self.panels.first().map_or(0, Vec::len);
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out =
            format!("{magic}\n{} {}\n255\n", cols * w, self.panels.len() * h).into_bytes();
        for row in &self.panels {
            for y in 0..h {
                for panel in row {
                    for (i, &v) in panel[y * w * c..(y + 1) * w * c].iter().enumerate() {
                        let px = stats.denormalize_value(v, i % c);
                        out.push((px * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write(&self, stats: &ChannelStats, path: &Path) -> Result<(), CliError> {
        let bytes = self.to_pnm(stats)?;
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
    }
}
