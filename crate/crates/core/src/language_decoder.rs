//! Character-level causal transformer that reads projected visual tokens
//! followed by prompt text and writes the coordinate answer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraHost;
use crate::nn::{Block, BlockCache, KvCache, LayerNorm, LayerNormCache, Linear, Visit, VisitMut};
use crate::prompt_codec::{decode_text, parse_coords, EOS};
use crate::tensor::Tensor;
use crate::vision_encoder::{block_init_std, join, GradScope, INIT_STD};

pub use crate::lora::{attach_lora, merge_lora, LoraAdapter};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: crate::prompt_codec::Vocabulary::builtin().len(),
            max_seq_len: 320,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.d_model {} must be a positive multiple of decoder.heads {}",
                self.d_model, self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "decoder.mlp_ratio, decoder.vocab_size and decoder.max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, v) = (self.d_model, self.vocab_size);
        v * d + self.max_seq_len * d + self.depth * Block::param_count(d, self.mlp_ratio) + 2 * d + (d * v + v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub tok_embed: Tensor,
    /// Shared by visual positions `0..N` and text positions `N..N+L`.
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

pub struct DecoderCache {
    visual_len: usize,
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    normed: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Generated ids, including the terminating eos when one was produced.
    pub ids: Vec<u32>,
    pub coords: Option<(f64, f64)>,
}

impl DecodeResult {
    pub fn parse_failed(&self) -> bool {
        self.coords.is_none()
    }
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_embed = Tensor::trunc_normal(&[config.vocab_size, d], INIT_STD, rng);
        let pos_embed = Tensor::trunc_normal(&[config.max_seq_len, d], INIT_STD, rng);
        let blocks = (0..config.depth)
            .map(|_| Block::new(d, config.heads, config.mlp_ratio, block_init_std(d), rng))
            .collect();
        let head = Linear::new(d, config.vocab_size, INIT_STD, rng);
        Ok(Decoder {
            ln_f: LayerNorm::new(d),
            config,
            tok_embed,
            pos_embed,
            blocks,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Decoder {
            config: self.config.clone(),
            tok_embed: self.tok_embed.zeros_like(),
            pos_embed: self.pos_embed.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            ln_f: self.ln_f.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn check(&self, visual: &Tensor, len: usize) -> Result<()> {
        let d = self.config.d_model;
        if visual.shape.len() != 2 || visual.cols() != d {
            return Err(Error::shape("decoder visual input", format!("[N, {d}]"), format!("{:?}", visual.shape)));
        }
        let total = visual.rows() + len;
        if total > self.config.max_seq_len {
            return Err(Error::Capacity {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(Error::Domain(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Token plus positional embeddings for ids placed at positions `pos0..`.
    fn embed_tokens(&self, ids: &[u32], pos0: usize) -> Tensor {
        let d = self.config.d_model;
        let mut x = Tensor::zeros(&[ids.len(), d]);
        for (i, &t) in ids.iter().enumerate() {
            let row = x.row_mut(i);
            let e = self.tok_embed.row(t as usize);
            let p = self.pos_embed.row(pos0 + i);
            for j in 0..d {
                row[j] = e[j] + p[j];
            }
        }
        x
    }

    fn embed_visual(&self, visual: &Tensor) -> Tensor {
        let mut x = visual.clone();
        for i in 0..x.rows() {
            let p = self.pos_embed.row(i);
            for (a, b) in x.row_mut(i).iter_mut().zip(p) {
                *a += b;
            }
        }
        x
    }

    /// Logits `[L, vocab]` for the text positions of `[visual; ids]`.
    pub fn forward(&self, visual: &Tensor, ids: &[u32]) -> Result<(Tensor, DecoderCache)> {
        self.check(visual, ids.len())?;
        self.check_ids(ids)?;
        let (n, l, d) = (visual.rows(), ids.len(), self.config.d_model);
        let mut x = Tensor::zeros(&[n + l, d]);
        x.data[..n * d].copy_from_slice(&self.embed_visual(visual).data);
        x.data[n * d..].copy_from_slice(&self.embed_tokens(ids, n).data);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, true);
            caches.push(c);
            x = y;
        }
        let text = Tensor::from_vec(&[l, d], x.data[n * d..].to_vec());
        let (normed, ln_cache) = self.ln_f.forward(&text);
        let logits = self.head.forward(&normed);
        Ok((
            logits,
            DecoderCache {
                visual_len: n,
                ids: ids.to_vec(),
                blocks: caches,
                ln_f: ln_cache,
                normed,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `dL/dV`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_logits: &Tensor,
        grads: &mut Decoder,
        scope: GradScope,
    ) -> Tensor {
        let (n, l, d) = (cache.visual_len, cache.ids.len(), self.config.d_model);
        let d_normed = self
            .head
            .backward(&cache.normed, d_logits, &mut grads.head, scope.embeddings);
        let d_text = self
            .ln_f
            .backward(&cache.ln_f, &d_normed, &mut grads.ln_f, scope.embeddings);
        let mut dx = Tensor::zeros(&[n + l, d]);
        dx.data[n * d..].copy_from_slice(&d_text.data);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[i], &dx, &mut grads.blocks[i], scope.blocks);
        }
        if scope.embeddings {
            for i in 0..n + l {
                let src = dx.row(i);
                for (g, s) in grads.pos_embed.row_mut(i).iter_mut().zip(src) {
                    *g += s;
                }
            }
            for (i, &t) in cache.ids.iter().enumerate() {
                let src = dx.row(n + i);
                for (g, s) in grads.tok_embed.row_mut(t as usize).iter_mut().zip(src) {
                    *g += s;
                }
            }
        }
        Tensor::from_vec(&[n, d], dx.data[..n * d].to_vec())
    }

    fn step_logits(&self, x: &Tensor, caches: &mut [KvCache]) -> Vec<f64> {
        let mut h = x.clone();
        for (block, kv) in self.blocks.iter().zip(caches.iter_mut()) {
            h = block.forward_step(&h, kv);
        }
        let last = Tensor::from_vec(&[1, self.config.d_model], h.row(h.rows() - 1).to_vec());
        self.head.forward(&self.ln_f.apply(&last)).data
    }

    /// Greedy generation after `prompt_ids`; stops at eos, `max_answer_len`
    /// generated tokens, or the end of the position table.
    pub fn greedy_decode(&self, visual: &Tensor, prompt_ids: &[u32], max_answer_len: usize) -> Result<DecodeResult> {
        self.check(visual, prompt_ids.len())?;
        self.check_ids(prompt_ids)?;
        let n = visual.rows();
        let mut out = Vec::new();
        if max_answer_len > 0 {
            let mut kv: Vec<KvCache> = self.blocks.iter().map(|_| KvCache::new()).collect();
            let d = self.config.d_model;
            let l = prompt_ids.len();
            let mut x = Tensor::zeros(&[n + l, d]);
            x.data[..n * d].copy_from_slice(&self.embed_visual(visual).data);
            x.data[n * d..].copy_from_slice(&self.embed_tokens(prompt_ids, n).data);
            let mut pos = n + l;
            let mut logits = self.step_logits(&x, &mut kv);
            loop {
                let next = argmax(&logits);
                out.push(next);
                if next == EOS || out.len() >= max_answer_len || pos >= self.config.max_seq_len {
                    break;
                }
                logits = self.step_logits(&self.embed_tokens(&[next], pos), &mut kv);
                pos += 1;
            }
        }
        let coords = parse_answer(&out);
        Ok(DecodeResult { ids: out, coords })
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visit<'a, '_>) {
        f(&join(prefix, "tok_embed"), &self.tok_embed);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.head.visit(&join(prefix, "head.w"), &join(prefix, "head.b"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        f(&join(prefix, "tok_embed"), &mut self.tok_embed);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.head
            .visit_mut(&join(prefix, "head.w"), &join(prefix, "head.b"), f);
    }
}

impl LoraHost for Decoder {
    fn lora_slots(&mut self) -> Vec<(String, &mut Linear)> {
        let mut slots = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            slots.push((format!("block{i}.attn.wq"), &mut b.attn.wq));
            slots.push((format!("block{i}.attn.wv"), &mut b.attn.wv));
        }
        slots
    }
}

/// Lowest id wins ties.
fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Coordinates of a generated answer: a leading space, the pair, then eos.
pub fn parse_answer(ids: &[u32]) -> Option<(f64, f64)> {
    let body = match ids.split_last() {
        Some((&EOS, rest)) => rest,
        _ => return None,
    };
    if body.contains(&EOS) {
        return None;
    }
    let text = decode_text(body).ok()?;
    parse_coords(text.strip_prefix(' ')?)
}

/// Sum of masked token negative log-likelihoods, mask count, and the gradient
/// of that sum with respect to the logits.
pub fn masked_nll(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<(f64, usize, Tensor)> {
    let (l, v) = (logits.rows(), logits.cols());
    if targets.len() != l || mask.len() != l {
        return Err(Error::shape(
            "masked cross-entropy",
            format!("{l} targets and mask entries"),
            format!("{} targets, {} mask entries", targets.len(), mask.len()),
        ));
    }
    let mut grad = Tensor::zeros(&[l, v]);
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..l {
        if !mask[i] {
            continue;
        }
        let t = targets[i] as usize;
        if t >= v {
            return Err(Error::Domain(format!("target id {t} outside vocabulary of {v}")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - row[t];
        count += 1;
        let g = grad.row_mut(i);
        for j in 0..v {
            g[j] = (row[j] - lse).exp();
        }
        g[t] -= 1.0;
    }
    if count == 0 {
        return Err(Error::Domain("answer mask selects no positions".into()));
    }
    Ok((sum, count, grad))
}

/// Mean negative log-likelihood over mask-true positions.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let (sum, count, _) = masked_nll(logits, targets, mask)?;
    Ok(sum / count as f64)
}
