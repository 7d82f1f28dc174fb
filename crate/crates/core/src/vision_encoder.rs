//! Patch transformer that turns a square grayscale image into a sequence of
//! patch features, one token per non-overlapping `patch_size` square.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraHost;
use crate::nn::{Block, BlockCache, Linear, Visit, VisitMut};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Fan-in scaled std for transformer block weights, which stay frozen under
/// adapter training.
pub fn block_init_std(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub d_vis: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            depth: 2,
            d_vis: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "encoder.image_size {} must be a positive multiple of encoder.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_vis == 0 || self.heads == 0 || self.d_vis % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.d_vis {} must be a positive multiple of encoder.heads {}",
                self.d_vis, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("encoder.mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Closed-form parameter count (adapters excluded).
    pub fn param_count(&self) -> usize {
        let d = self.d_vis;
        (self.patch_dim() * d + d)
            + self.num_patches() * d
            + self.depth * Block::param_count(d, self.mlp_ratio)
    }
}

/// `B x N x d_vis` patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PatchFeatures {
    pub fn from_images(images: Vec<Tensor>) -> Self {
        let batch = images.len();
        let (tokens, dim) = images.first().map_or((0, 0), |t| (t.rows(), t.cols()));
        let data = images.into_iter().flat_map(|t| t.data).collect();
        PatchFeatures {
            batch,
            tokens,
            dim,
            data,
        }
    }

    /// Features of one image as a `[N, d_vis]` tensor.
    pub fn image(&self, b: usize) -> Tensor {
        let n = self.tokens * self.dim;
        Tensor::from_vec(&[self.tokens, self.dim], self.data[b * n..(b + 1) * n].to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which parameter groups receive gradients during a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradScope {
    /// Transformer block weights (attention, MLP, norms).
    pub blocks: bool,
    /// Patch/token/positional embeddings and output heads.
    pub embeddings: bool,
}

impl GradScope {
    pub const ALL: GradScope = GradScope {
        blocks: true,
        embeddings: true,
    };
    pub const ADAPTERS_ONLY: GradScope = GradScope {
        blocks: false,
        embeddings: false,
    };
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
}

pub struct EncoderCache {
    patches: Tensor,
    blocks: Vec<BlockCache>,
}

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_vis;
        let patch_embed = Linear::new(config.patch_dim(), d, INIT_STD, rng);
        let pos_embed = Tensor::trunc_normal(&[config.num_patches(), d], INIT_STD, rng);
        let blocks = (0..config.depth)
            .map(|_| Block::new(d, config.heads, config.mlp_ratio, block_init_std(d), rng))
            .collect();
        Ok(VisionEncoder {
            config,
            patch_embed,
            pos_embed,
            blocks,
        })
    }

    pub fn zeros_like(&self) -> Self {
        VisionEncoder {
            config: self.config.clone(),
            patch_embed: self.patch_embed.zeros_like(),
            pos_embed: self.pos_embed.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    /// Raster-order patches, each flattened row-major: `[N, patch_size^2]`.
    pub fn patchify(&self, image: &[f64]) -> Tensor {
        let (s, p, g) = (self.config.image_size, self.config.patch_size, self.config.grid());
        let mut out = Tensor::zeros(&[g * g, p * p]);
        for gr in 0..g {
            for gc in 0..g {
                let row = out.row_mut(gr * g + gc);
                for i in 0..p {
                    let src = (gr * p + i) * s + gc * p;
                    row[i * p..(i + 1) * p].copy_from_slice(&image[src..src + p]);
                }
            }
        }
        out
    }

    /// Linear patch embedding without positional embedding.
    pub fn embed_patches(&self, image: &[f64]) -> Tensor {
        self.patch_embed.forward(&self.patchify(image))
    }

    fn check_image(&self, len: usize) -> Result<()> {
        let s = self.config.image_size;
        if len != s * s {
            return Err(Error::shape("encoder input", format!("{s}x{s} image"), format!("{len} pixels")));
        }
        Ok(())
    }

    pub fn forward_image(&self, image: &[f64]) -> Result<(Tensor, EncoderCache)> {
        self.check_image(image.len())?;
        let patches = self.patchify(image);
        let mut x = self.patch_embed.forward(&patches);
        x.add_assign(&self.pos_embed);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, false);
            caches.push(c);
            x = y;
        }
        Ok((
            x,
            EncoderCache {
                patches,
                blocks: caches,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/d(features)` of one image.
    pub fn backward_image(
        &self,
        cache: &EncoderCache,
        d_out: &Tensor,
        grads: &mut VisionEncoder,
        scope: GradScope,
    ) {
        let mut dx = d_out.clone();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[i], &dx, &mut grads.blocks[i], scope.blocks);
        }
        if scope.embeddings {
            grads.pos_embed.add_assign(&dx);
            self.patch_embed
                .backward(&cache.patches, &dx, &mut grads.patch_embed, true);
        }
    }

    /// Encodes a `[B, H, W]` batch.
    pub fn encode(&self, images: &Tensor) -> Result<PatchFeatures> {
        let s = self.config.image_size;
        if images.shape.len() != 3 || images.shape[1] != s || images.shape[2] != s {
            return Err(Error::shape(
                "encoder input",
                format!("[B, {s}, {s}]"),
                format!("{:?}", images.shape),
            ));
        }
        let outs = (0..images.shape[0])
            .map(|b| self.forward_image(images.row(b)).map(|(t, _)| t))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchFeatures::from_images(outs))
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visit<'a, '_>) {
        self.patch_embed.visit(
            &join(prefix, "patch_embed.w"),
            &join(prefix, "patch_embed.b"),
            f,
        );
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.patch_embed.visit_mut(
            &join(prefix, "patch_embed.w"),
            &join(prefix, "patch_embed.b"),
            f,
        );
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }

    /// Name-sorted `(name, shape)` listing of every parameter, adapters included.
    pub fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t.shape.clone())));
        out.sort();
        out
    }
}

impl LoraHost for VisionEncoder {
    fn lora_slots(&mut self) -> Vec<(String, &mut Linear)> {
        let mut slots = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            slots.push((format!("block{i}.attn.wq"), &mut b.attn.wq));
            slots.push((format!("block{i}.attn.wv"), &mut b.attn.wv));
        }
        slots
    }
}
