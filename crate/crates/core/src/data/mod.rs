//! Labelled image datasets: CIFAR-10 binary, PMDS files and synthetic data.

mod cifar;
mod pmds;
mod synthetic;

pub use cifar::{load_cifar10_binary, CIFAR_RECORD_BYTES, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
pub use pmds::{
    decode_pmds, encode_pmds, load_raw_tensor_dataset, write_pmds, PMDS_MAGIC, PMDS_VERSION,
};
pub use synthetic::{dct_pattern, synthetic_global_factors, SyntheticConfig, SyntheticTruth};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Pixel storage. Byte pixels read as `v / 255`.
#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl Pixels {
    fn len(&self) -> usize {
        match self {
            Pixels::U8(v) => v.len(),
            Pixels::F32(v) => v.len(),
        }
    }

    fn value(&self, i: usize) -> f64 {
        match self {
            Pixels::U8(v) => v[i] as f64 / 255.0,
            Pixels::F32(v) => v[i] as f64,
        }
    }
}

/// Images `N x H x W x C` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub pixels: Pixels,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        (height, width, channels): (usize, usize, usize),
        num_classes: usize,
        pixels: Pixels,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            split,
            height,
            width,
            channels,
            num_classes,
            pixels,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let per = self.image_len();
        if per == 0 {
            return Err(Error::invalid("dataset images must have positive extents"));
        }
        if self.pixels.len() != self.labels.len() * per {
            return Err(Error::invalid(format!(
                "{} labels but {} pixel values ({} per image)",
                self.labels.len(),
                self.pixels.len(),
                per
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {y} outside [0, {})",
                self.num_classes
            )));
        }
        if let Pixels::F32(v) = &self.pixels {
            if v.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite("dataset pixels".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        let per = self.image_len();
        (i * per..(i + 1) * per)
            .map(|j| self.pixels.value(j))
            .collect()
    }

    /// `[len(indices), H, W, C]` batch of raw pixel values.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("image index {i} out of range")));
            }
            data.extend((i * per..(i + 1) * per).map(|j| self.pixels.value(j)));
        }
        Tensor::new(
            vec![indices.len(), self.height, self.width, self.channels],
            data,
        )
    }

    /// All images as an `[N, H*W*C]` matrix.
    pub fn flat_matrix(&self) -> Result<Tensor> {
        let n = self.len();
        let t = self.batch(&(0..n).collect::<Vec<_>>())?;
        t.reshape(vec![n, self.image_len()])
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> ChannelStats {
        let c = self.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..self.pixels.len() {
            let v = self.pixels.value(i);
            sum[i % c] += v;
            sq[i % c] += v * v;
        }
        let count = (self.pixels.len() / c).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    /// The first `n` images.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let per = self.image_len();
        let pixels = match &self.pixels {
            Pixels::U8(v) => Pixels::U8(v[..n * per].to_vec()),
            Pixels::F32(v) => Pixels::F32(v[..n * per].to_vec()),
        };
        Dataset::new(
            self.name.clone(),
            self.split,
            (self.height, self.width, self.channels),
            self.num_classes,
            pixels,
            self.labels[..n].to_vec(),
        )
    }
}

/// Normalization statistics, computed on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Zero-variance channels get std 1.
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Normalizes a `[..., C]` tensor in place.
    pub fn normalize(&self, x: &mut Tensor) {
        let c = self.mean.len();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
    }

    pub fn denormalize_value(&self, v: f64, channel: usize) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_labels() {
        let r = Dataset::new(
            "t",
            Split::Train,
            (2, 2, 1),
            2,
            Pixels::U8(vec![0; 4]),
            vec![2],
        );
        assert!(r.is_err());
        let r = Dataset::new(
            "t",
            Split::Train,
            (2, 2, 1),
            2,
            Pixels::U8(vec![0; 5]),
            vec![1],
        );
        assert!(r.is_err());
    }

    #[test]
    fn stats_and_batches() {
        let ds = Dataset::new(
            "t",
            Split::Train,
            (1, 2, 2),
            2,
            Pixels::F32(vec![1.0, 10.0, 3.0, 10.0, 5.0, 10.0, 7.0, 10.0]),
            vec![0, 1],
        )
        .unwrap();
        let s = ds.channel_stats();
        assert_eq!(s.mean, vec![4.0, 10.0]);
        assert!((s.std[0] - 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.std[1], 1.0);
        let mut b = ds.batch(&[1]).unwrap();
        assert_eq!(b.shape(), &[1, 1, 2, 2]);
        s.normalize(&mut b);
        assert!((b.data()[0] - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.data()[1], 0.0);
    }
}
