use crate::error::{Error, Result};

/// Encoder/decoder geometry.
///
/// Defaults follow ViT-T/8: hidden 192, 12 heads, MLP 768, 8x8 patches, with a
/// 12-block encoder and a 4-block, 128-wide decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_px: usize,
    pub enc_hidden: usize,
    pub enc_heads: usize,
    pub enc_mlp: usize,
    pub enc_depth: usize,
    pub dec_hidden: usize,
    pub dec_heads: usize,
    pub dec_mlp: usize,
    pub dec_depth: usize,
}

impl VitConfig {
    pub fn vit_t8(image_h: usize, image_w: usize, channels: usize) -> Self {
        Self {
            image_h,
            image_w,
            channels,
            patch_px: 8,
            enc_hidden: 192,
            enc_heads: 12,
            enc_mlp: 768,
            enc_depth: 12,
            dec_hidden: 128,
            dec_heads: 4,
            dec_mlp: 512,
            dec_depth: 4,
        }
    }

    /// Small model for desk-scale runs: two encoder blocks, one decoder block.
    pub fn desk(image_h: usize, image_w: usize, channels: usize) -> Self {
        Self {
            image_h,
            image_w,
            channels,
            patch_px: 4,
            enc_hidden: 32,
            enc_heads: 4,
            enc_mlp: 64,
            enc_depth: 2,
            dec_hidden: 32,
            dec_heads: 4,
            dec_mlp: 64,
            dec_depth: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.patch_px == 0
            || !self.image_h.is_multiple_of(self.patch_px)
            || !self.image_w.is_multiple_of(self.patch_px)
        {
            return fail(
                "patch_px",
                format!(
                    "image {}x{} is not divisible into {}px patches",
                    self.image_h, self.image_w, self.patch_px
                ),
            );
        }
        if self.channels == 0 {
            return fail("channels", "must be positive".into());
        }
        for (name, hidden, heads) in [
            ("enc_heads", self.enc_hidden, self.enc_heads),
            ("dec_heads", self.dec_hidden, self.dec_heads),
        ] {
            if heads == 0 || hidden % heads != 0 {
                return fail(
                    name,
                    format!("hidden size {hidden} is not divisible by {heads} heads"),
                );
            }
            if hidden % 4 != 0 {
                return fail(
                    name,
                    format!(
                        "hidden size {hidden} must be a multiple of 4 for 2-D sin-cos embeddings"
                    ),
                );
            }
        }
        if self.enc_mlp == 0 || self.dec_mlp == 0 {
            return fail("enc_mlp", "MLP widths must be positive".into());
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_px
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_px
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Length of one flattened patch token.
    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * self.channels
    }

    pub fn image_dim(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }

    pub fn enc_head_dim(&self) -> usize {
        self.enc_hidden / self.enc_heads
    }

    pub fn dec_head_dim(&self) -> usize {
        self.dec_hidden / self.dec_heads
    }

    /// Total parameter count implied by the geometry.
    pub fn parameter_count(&self) -> usize {
        let block = |h: usize, m: usize| 4 * h + 4 * (h * h + h) + (h * m + m) + (m * h + h);
        let pd = self.patch_dim();
        let (e, d) = (self.enc_hidden, self.dec_hidden);
        pd * e
            + e
            + e
            + self.enc_depth * block(e, self.enc_mlp)
            + 2 * e
            + e * d
            + d
            + d
            + self.dec_depth * block(d, self.dec_mlp)
            + 2 * d
            + d * pd
            + pd
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_t8_geometry() {
        let c = VitConfig::vit_t8(32, 32, 3);
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.patch_dim(), 192);
        assert_eq!(c.enc_head_dim(), 16);
    }

    #[test]
    fn rejects_indivisible() {
        let mut c = VitConfig::desk(16, 16, 1);
        c.patch_px = 5;
        assert!(c.validate().is_err());
        let mut c = VitConfig::desk(16, 16, 1);
        c.enc_heads = 3;
        assert!(c.validate().is_err());
    }
}
