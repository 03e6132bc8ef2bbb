//! Vision Transformer encoder/decoder with MAE and PMAE forward modes.
//!
//! Images are `[B, H, W, C]` row-major. Patch tokens are numbered in
//! row-major grid order and flattened as `(py, px, c)`.

mod config;
mod params;

pub use config::VitConfig;
pub use params::{trunc_normal, Graph, ParamGrads, Params};

use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::{ComponentMask, PatchMask};
use crate::pca::PcaBasis;
use crate::tensor::{Tensor, Var};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Splits `[B, H, W, C]` images into `[B, P, p*p*C]` tokens.
pub fn patchify(images: &Tensor, patch_px: usize) -> Result<Tensor> {
    let (b, h, w, c) = image_dims(images)?;
    if patch_px == 0 || h % patch_px != 0 || w % patch_px != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {patch_px}px patches"
        )));
    }
    let (gh, gw) = (h / patch_px, w / patch_px);
    let row = patch_px * c;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch_px {
                    let start = ((bi * h + gy * patch_px + py) * w + gx * patch_px) * c;
                    out.extend_from_slice(&src[start..start + row]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, patch_px * row], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, config: &VitConfig) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != config.num_patches() || s[2] != config.patch_dim() {
        return Err(Error::invalid(format!(
            "tokens of shape {s:?} do not match {} patches of length {}",
            config.num_patches(),
            config.patch_dim()
        )));
    }
    let (b, h, w, c, p) = (
        s[0],
        config.image_h,
        config.image_w,
        config.channels,
        config.patch_px,
    );
    let gw = config.grid_w();
    let row = p * c;
    let src = tokens.data();
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for t in 0..config.num_patches() {
            let (gy, gx) = (t / gw, t % gw);
            for py in 0..p {
                let from = (bi * s[1] + t) * s[2] + py * row;
                let to = ((bi * h + gy * p + py) * w + gx * p) * c;
                out[to..to + row].copy_from_slice(&src[from..from + row]);
            }
        }
    }
    Tensor::new(vec![b, h, w, c], out)
}

fn image_dims(images: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *images.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        ref s => Err(Error::invalid(format!(
            "expected [B, H, W, C] images, got {s:?}"
        ))),
    }
}

/// Fixed 2-D sin-cos table of shape `[grid_h * grid_w, dim]`.
///
/// The first half of each row encodes the row coordinate, the second half the
/// column; each half is `[sin(pos * w_k), cos(pos * w_k)]` with
/// `w_k = 10000^(-k / (dim / 4))`.
pub fn sincos_2d(grid_h: usize, grid_w: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let freq: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for pos in [gy as f64, gx as f64] {
                out.extend(freq.iter().map(|w| (pos * w).sin()));
                out.extend(freq.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Tensor::new(vec![grid_h * grid_w, dim], out).expect("finite table")
}

/// Encoder/decoder weights plus the fixed positional tables.
#[derive(Clone, Debug)]
pub struct VitModel {
    config: VitConfig,
    pub params: Params,
    pos_enc: Tensor,
    pos_dec: Tensor,
}

impl VitModel {
    pub fn new<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Params::new();
        let (e, d, pd) = (config.enc_hidden, config.dec_hidden, config.patch_dim());
        init_dense(&mut p, rng, "patch_embed", pd, e);
        p.insert("cls_token", trunc_normal(rng, vec![e], INIT_STD));
        for i in 0..config.enc_depth {
            add_block(&mut p, rng, &format!("enc.block{i}"), e, config.enc_mlp);
        }
        add_norm(&mut p, "enc.norm", e);
        init_dense(&mut p, rng, "dec.embed", e, d);
        p.insert("mask_token", trunc_normal(rng, vec![d], INIT_STD));
        for i in 0..config.dec_depth {
            add_block(&mut p, rng, &format!("dec.block{i}"), d, config.dec_mlp);
        }
        add_norm(&mut p, "dec.norm", d);
        init_dense(&mut p, rng, "dec.head", d, pd);
        Ok(Self::from_params(config, p))
    }

    fn from_params(config: VitConfig, params: Params) -> Self {
        let pos_enc = sincos_2d(config.grid_h(), config.grid_w(), config.enc_hidden);
        let pos_dec = sincos_2d(config.grid_h(), config.grid_w(), config.dec_hidden);
        Self {
            config,
            params,
            pos_enc,
            pos_dec,
        }
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn graph(&self, trainable: bool) -> Graph<'_> {
        Graph::new(&self.params, trainable)
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let (b, h, w, c) = image_dims(images)?;
        let cfg = &self.config;
        if (h, w, c) != (cfg.image_h, cfg.image_w, cfg.channels) {
            return Err(Error::ShapeMismatch {
                op: "vit input",
                lhs: images.shape().to_vec(),
                rhs: vec![b, cfg.image_h, cfg.image_w, cfg.channels],
            });
        }
        Ok(b)
    }

    /// Encodes the listed patch positions per image, in the listed order.
    ///
    /// Output is `[B, 1 + V, enc_hidden]` after the final norm, CLS first.
    /// Positional embeddings are added before tokens are selected.
    pub fn encode_selected(
        &self,
        g: &mut Graph<'_>,
        images: &Tensor,
        positions: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let b = self.check_images(images)?;
        let e = self.config.enc_hidden;
        let tokens = g.tape.constant(patchify(images, self.config.patch_px)?);
        let (w, bias) = (g.p("patch_embed.weight")?, g.p("patch_embed.bias")?);
        let mut x = g.tape.linear(tokens, w, bias)?;
        let pos = g.tape.constant(self.pos_enc.clone());
        x = g.tape.add(x, pos)?;
        if let Some(index) = positions {
            if index.iter().any(Vec::is_empty) {
                return Err(Error::EmptyEncoderInput);
            }
            x = g.tape.gather_rows(x, index)?;
        }
        let cls = g.p("cls_token")?;
        let cls = g.tape.reshape(cls, &[1, e])?;
        let cls = g.tape.expand(cls, &[b])?;
        x = g.tape.concat(&[cls, x], 1)?;
        for i in 0..self.config.enc_depth {
            x = block(g, &format!("enc.block{i}"), x, self.config.enc_heads)?;
        }
        norm(g, "enc.norm", x)
    }

    /// Encoder pass over the unmasked patches only.
    pub fn encode_visible(
        &self,
        g: &mut Graph<'_>,
        images: &Tensor,
        masks: &[PatchMask],
    ) -> Result<Var> {
        let index = self.visible_index(images, masks)?;
        self.encode_selected(g, images, Some(&index))
    }

    /// Encoder pass over every patch.
    pub fn encode_full(&self, g: &mut Graph<'_>, images: &Tensor) -> Result<Var> {
        self.encode_selected(g, images, None)
    }

    fn visible_index(&self, images: &Tensor, masks: &[PatchMask]) -> Result<Vec<Vec<usize>>> {
        let b = self.check_images(images)?;
        if masks.len() != b {
            return Err(Error::invalid(format!(
                "{} masks for a batch of {b}",
                masks.len()
            )));
        }
        let (gh, gw) = (self.config.grid_h(), self.config.grid_w());
        let mut index = Vec::with_capacity(b);
        for m in masks {
            if (m.grid_h, m.grid_w) != (gh, gw) || m.masked.len() != gh * gw {
                return Err(Error::invalid(format!(
                    "mask grid {}x{} does not match patch grid {gh}x{gw}",
                    m.grid_h, m.grid_w
                )));
            }
            let v = m.visible_indices();
            if v.is_empty() {
                return Err(Error::EmptyEncoderInput);
            }
            index.push(v);
        }
        if index.iter().any(|v| v.len() != index[0].len()) {
            return Err(Error::invalid(
                "masks in a batch must hide the same number of patches",
            ));
        }
        Ok(index)
    }

    /// Decodes encoder output into `[B, P, patch_dim]` predictions.
    ///
    /// With `visible` set, latents are the visible tokens at those positions and
    /// the mask token fills the rest; otherwise latents cover all `P` patches.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        latents: Var,
        visible: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let s = g.tape.shape(latents).to_vec();
        let p = self.config.num_patches();
        let d = self.config.dec_hidden;
        if s.len() != 3 || s[2] != self.config.enc_hidden {
            return Err(Error::invalid(format!("latents of shape {s:?}")));
        }
        let (b, len) = (s[0], s[1] - 1);
        let (w, bias) = (g.p("dec.embed.weight")?, g.p("dec.embed.bias")?);
        let x = g.tape.linear(latents, w, bias)?;
        let cls = g.tape.slice(x, 1, 0, 1)?;
        let mut tokens = g.tape.slice(x, 1, 1, len)?;
        match visible {
            None => {
                if len != p {
                    return Err(Error::invalid(format!("{len} latents for {p} patches")));
                }
            }
            Some(index) => {
                if index.len() != b || index.iter().any(|v| v.len() != len) {
                    return Err(Error::invalid("visible index does not match latents"));
                }
                let identity = len == p
                    && index
                        .iter()
                        .all(|v| v.iter().enumerate().all(|(i, &j)| i == j));
                if !identity {
                    tokens = g.tape.scatter_rows(tokens, index, p)?;
                    let mut fill = vec![0.0; b * p * d];
                    for (bi, v) in index.iter().enumerate() {
                        let mut seen = vec![false; p];
                        v.iter().for_each(|&j| seen[j] = true);
                        for (j, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
                            let at = (bi * p + j) * d;
                            fill[at..at + d].iter_mut().for_each(|f| *f = 1.0);
                        }
                    }
                    let fill = g.tape.constant(Tensor::new(vec![b, p, d], fill)?);
                    let mt = g.p("mask_token")?;
                    let mt = g.tape.mul(fill, mt)?;
                    tokens = g.tape.add(tokens, mt)?;
                }
            }
        }
        let pos = g.tape.constant(self.pos_dec.clone());
        tokens = g.tape.add(tokens, pos)?;
        let mut x = g.tape.concat(&[cls, tokens], 1)?;
        for i in 0..self.config.dec_depth {
            x = block(g, &format!("dec.block{i}"), x, self.config.dec_heads)?;
        }
        x = norm(g, "dec.norm", x)?;
        let (w, bias) = (g.p("dec.head.weight")?, g.p("dec.head.bias")?);
        x = g.tape.linear(x, w, bias)?;
        g.tape.slice(x, 1, 1, p)
    }

    /// Folds `[B, P, patch_dim]` predictions back into `[B, H, W, C]` on the tape.
    pub fn unpatchify_var(&self, g: &mut Graph<'_>, tokens: Var) -> Result<Var> {
        let c = &self.config;
        let b = g.tape.shape(tokens)[0];
        let (p, ch) = (c.patch_px, c.channels);
        let x = g
            .tape
            .reshape(tokens, &[b, c.grid_h(), c.grid_w(), p, p, ch])?;
        let x = g.tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
        g.tape.reshape(x, &[b, c.image_h, c.image_w, ch])
    }

    /// `unpatchify(decode(encode_visible(x, m), m))`.
    pub fn forward_mae(
        &self,
        g: &mut Graph<'_>,
        images: &Tensor,
        masks: &[PatchMask],
    ) -> Result<Var> {
        let index = self.visible_index(images, masks)?;
        let z = self.encode_selected(g, images, Some(&index))?;
        let out = self.decode(g, z, Some(&index))?;
        self.unpatchify_var(g, out)
    }

    /// `unpatchify(decode(encode_full(masked_reconstruction(x))))`.
    pub fn forward_pmae(
        &self,
        g: &mut Graph<'_>,
        images: &Tensor,
        mask: &ComponentMask,
        basis: &PcaBasis,
    ) -> Result<Var> {
        let input = self.pmae_input(images, mask, basis)?;
        let z = self.encode_full(g, &input)?;
        let out = self.decode(g, z, None)?;
        self.unpatchify_var(g, out)
    }

    /// The image the PMAE encoder sees: visible components projected back.
    pub fn pmae_input(
        &self,
        images: &Tensor,
        mask: &ComponentMask,
        basis: &PcaBasis,
    ) -> Result<Tensor> {
        let b = self.check_images(images)?;
        let flat = images.reshape(vec![b, self.config.image_dim()])?;
        basis
            .masked_reconstruction(&flat, mask)?
            .reshape(images.shape().to_vec())
    }

    /// CLS outputs of the full encoder, `[B, enc_hidden]`, without a tape history.
    pub fn cls_features(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = self.graph(false);
        let z = self.encode_full(&mut g, images)?;
        let cls = g.tape.slice(z, 1, 0, 1)?;
        let t = g.tape.tensor(cls);
        t.reshape(vec![t.shape()[0], self.config.enc_hidden])
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::tensor::write_checkpoint(path, &self.params.to_checkpoint())
    }

    /// Builds a model of `config` and fills it from a checkpoint file.
    pub fn load(config: VitConfig, path: &std::path::Path) -> Result<Self> {
        let mut model = Self::new(config, &mut crate::rng::seeded(0))?;
        model
            .params
            .load_checkpoint(&crate::tensor::read_checkpoint(path)?)?;
        Ok(model)
    }
}

fn add_norm(p: &mut Params, name: &str, dim: usize) {
    p.insert(format!("{name}.weight"), Tensor::full(vec![dim], 1.0));
    p.insert(format!("{name}.bias"), Tensor::zeros(vec![dim]));
}

fn init_dense<R: Rng + ?Sized>(
    p: &mut Params,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    p.insert(
        format!("{name}.weight"),
        trunc_normal(rng, vec![fan_in, fan_out], INIT_STD),
    );
    p.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
}

fn add_block<R: Rng + ?Sized>(
    p: &mut Params,
    rng: &mut R,
    prefix: &str,
    hidden: usize,
    mlp: usize,
) {
    add_norm(p, &format!("{prefix}.norm1"), hidden);
    for part in ["q", "k", "v", "proj"] {
        init_dense(p, rng, &format!("{prefix}.attn.{part}"), hidden, hidden);
    }
    add_norm(p, &format!("{prefix}.norm2"), hidden);
    init_dense(p, rng, &format!("{prefix}.mlp.fc1"), hidden, mlp);
    init_dense(p, rng, &format!("{prefix}.mlp.fc2"), mlp, hidden);
}

fn dense(g: &mut Graph<'_>, name: &str, x: Var) -> Result<Var> {
    let w = g.p(&format!("{name}.weight"))?;
    let b = g.p(&format!("{name}.bias"))?;
    g.tape.linear(x, w, b)
}

fn norm(g: &mut Graph<'_>, name: &str, x: Var) -> Result<Var> {
    let w = g.p(&format!("{name}.weight"))?;
    let b = g.p(&format!("{name}.bias"))?;
    let y = g.tape.layer_norm(x, LN_EPS)?;
    let y = g.tape.mul(y, w)?;
    g.tape.add(y, b)
}

fn attention(g: &mut Graph<'_>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let (b, t, h) = (s[0], s[1], s[2]);
    let dh = h / heads;
    let split = |g: &mut Graph<'_>, part: &str, perm: &[usize]| -> Result<Var> {
        let y = dense(g, &format!("{prefix}.attn.{part}"), x)?;
        let y = g.tape.reshape(y, &[b, t, heads, dh])?;
        g.tape.permute(y, perm)
    };
    let q = split(g, "q", &[0, 2, 1, 3])?;
    let k = split(g, "k", &[0, 2, 3, 1])?;
    let v = split(g, "v", &[0, 2, 1, 3])?;
    let scores = g.tape.bmm(q, k)?;
    let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.tape.softmax(scores)?;
    let y = g.tape.bmm(attn, v)?;
    let y = g.tape.permute(y, &[0, 2, 1, 3])?;
    let y = g.tape.reshape(y, &[b, t, h])?;
    dense(g, &format!("{prefix}.attn.proj"), y)
}

fn block(g: &mut Graph<'_>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = norm(g, &format!("{prefix}.norm1"), x)?;
    let h = attention(g, prefix, h, heads)?;
    let x = g.tape.add(x, h)?;
    let h = norm(g, &format!("{prefix}.norm2"), x)?;
    let h = dense(g, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.tape.gelu(h)?;
    let h = dense(g, &format!("{prefix}.mlp.fc2"), h)?;
    g.tape.add(x, h)
}
