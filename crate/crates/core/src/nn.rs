//! Transformer building blocks with hand-written reverse-mode gradients.
//!
//! Activations are row-major `[tokens, features]` tensors. Every layer exposes a
//! `forward` that returns what its `backward` needs, and a `backward` that
//! accumulates parameter gradients into a same-shaped gradient struct. When
//! `base` is false the frozen base weights are skipped and only LoRA factors
//! receive gradients; input gradients are always produced.

use rand::Rng;

use crate::lora::LoraAdapter;
use crate::tensor::{gemm, MatRef, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Callback receiving `(name, tensor)` pairs in a fixed structural order.
pub type Visit<'a, 'v> = dyn FnMut(&str, &'a Tensor) + 'v;
pub type VisitMut<'v> = dyn FnMut(&str, &mut Tensor) + 'v;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[d_in, d_out]`, applied as `y = x w + b`.
    pub w: Tensor,
    pub b: Tensor,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            w: Tensor::trunc_normal(&[d_in, d_out], std, rng),
            b: Tensor::zeros(&[d_out]),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape[1]
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
            lora: self.lora.as_ref().map(LoraAdapter::zeros_like),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let t = x.rows();
        let mut y = Tensor::zeros(&[t, self.d_out()]);
        for i in 0..t {
            y.row_mut(i).copy_from_slice(&self.b.data);
        }
        gemm(1.0, x.mat(), self.w.mat(), 1.0, y.mat_mut());
        if let Some(lora) = &self.lora {
            let h = lora.down(x);
            gemm(lora.scale(), h.mat(), lora.b.mat().t(), 1.0, y.mat_mut());
        }
        y
    }

    /// Returns `dL/dx`; accumulates `dL/dw`, `dL/db` (when `base`) and LoRA gradients into `g`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, g: &mut Linear, base: bool) -> Tensor {
        let t = x.rows();
        let mut dx = Tensor::zeros(&[t, self.d_in()]);
        gemm(1.0, dy.mat(), self.w.mat().t(), 0.0, dx.mat_mut());
        if base {
            gemm(1.0, x.mat().t(), dy.mat(), 1.0, g.w.mat_mut());
            for i in 0..t {
                for (gb, d) in g.b.data.iter_mut().zip(dy.row(i)) {
                    *gb += d;
                }
            }
        }
        if let (Some(lora), Some(glora)) = (&self.lora, g.lora.as_mut()) {
            let s = lora.scale();
            let h = lora.down(x);
            // dB += s * dy^T h
            gemm(s, dy.mat().t(), h.mat(), 1.0, glora.b.mat_mut());
            // dh = s * dy B
            let mut dh = Tensor::zeros(&[t, lora.rank]);
            gemm(s, dy.mat(), lora.b.mat(), 0.0, dh.mat_mut());
            gemm(1.0, dh.mat().t(), x.mat(), 1.0, glora.a.mat_mut());
            gemm(1.0, dh.mat(), lora.a.mat(), 1.0, dx.mat_mut());
        }
        dx
    }

    pub fn visit<'a>(&'a self, w_name: &str, b_name: &str, f: &mut Visit<'a, '_>) {
        f(w_name, &self.w);
        f(b_name, &self.b);
        if let Some(lora) = &self.lora {
            f(&format!("{w_name}.lora_a"), &lora.a);
            f(&format!("{w_name}.lora_b"), &lora.b);
        }
    }

    pub fn visit_mut(&mut self, w_name: &str, b_name: &str, f: &mut VisitMut<'_>) {
        f(w_name, &mut self.w);
        f(b_name, &mut self.b);
        if let Some(lora) = &mut self.lora {
            f(&format!("{w_name}.lora_a"), &mut lora.a);
            f(&format!("{w_name}.lora_b"), &mut lora.b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct LayerNormCache {
    xhat: Tensor,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: self.gamma.zeros_like(),
            beta: self.beta.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, LayerNormCache) {
        let (t, d) = (x.rows(), x.cols());
        let mut y = Tensor::zeros(&[t, d]);
        let mut xhat = Tensor::zeros(&[t, d]);
        let mut rstd = Vec::with_capacity(t);
        for i in 0..t {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * r;
            }
            let yr = y.row_mut(i);
            for j in 0..d {
                yr[j] = xh[j] * self.gamma.data[j] + self.beta.data[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.forward(x).0
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Tensor,
        g: &mut LayerNorm,
        base: bool,
    ) -> Tensor {
        let (t, d) = (dy.rows(), dy.cols());
        let mut dx = Tensor::zeros(&[t, d]);
        let mut dxhat = vec![0.0; d];
        for i in 0..t {
            let xh = cache.xhat.row(i);
            let dyr = dy.row(i);
            if base {
                for j in 0..d {
                    g.gamma.data[j] += dyr[j] * xh[j];
                    g.beta.data[j] += dyr[j];
                }
            }
            for j in 0..d {
                dxhat[j] = dyr[j] * self.gamma.data[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let r = cache.rstd[i];
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visit<'a, '_>) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Multi-head self-attention. Heads occupy contiguous column blocks of the projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// `heads` stacked `[t, t]` probability matrices.
    probs: Vec<Tensor>,
    ctx: Tensor,
}

/// Keys and values of already-processed positions, for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache {
    k: Vec<f64>,
    v: Vec<f64>,
    len: usize,
}

impl KvCache {
    pub fn new() -> Self {
        KvCache {
            k: Vec::new(),
            v: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Default for KvCache {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_rows(s: &mut Tensor, causal_offset: Option<usize>) {
    let t = s.rows();
    for i in 0..t {
        let row = s.row_mut(i);
        let limit = match causal_offset {
            Some(off) => (off + i + 1).min(row.len()),
            None => row.len(),
        };
        let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row[..limit].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..limit].iter_mut() {
            *v /= sum;
        }
        for v in row[limit..].iter_mut() {
            *v = 0.0;
        }
    }
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        Attention {
            heads,
            wq: Linear::new(d, d, std, rng),
            wk: Linear::new(d, d, std, rng),
            wv: Linear::new(d, d, std, rng),
            wo: Linear::new(d, d, std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Attention {
            heads: self.heads,
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
        }
    }

    fn head_dim(&self) -> usize {
        self.wq.d_out() / self.heads
    }

    pub fn forward(&self, x: &Tensor, causal: bool) -> (Tensor, AttentionCache) {
        let t = x.rows();
        let d = self.wq.d_out();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut ctx = Tensor::zeros(&[t, d]);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut s = Tensor::zeros(&[t, t]);
            gemm(
                scale,
                q.mat().cols_slice(h * dh, dh),
                k.mat().cols_slice(h * dh, dh).t(),
                0.0,
                s.mat_mut(),
            );
            softmax_rows(&mut s, causal.then_some(0));
            gemm(
                1.0,
                s.mat(),
                v.mat().cols_slice(h * dh, dh),
                0.0,
                ctx.mat_mut().cols_slice(h * dh, dh),
            );
            probs.push(s);
        }
        let y = self.wo.forward(&ctx);
        (y, AttentionCache { q, k, v, probs, ctx })
    }

    pub fn backward(
        &self,
        x: &Tensor,
        cache: &AttentionCache,
        dy: &Tensor,
        g: &mut Attention,
        base: bool,
    ) -> Tensor {
        let t = x.rows();
        let d = self.wq.d_out();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.wo.backward(&cache.ctx, dy, &mut g.wo, base);
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        let mut dp = Tensor::zeros(&[t, t]);
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let dctx_h = dctx.mat().cols_slice(h * dh, dh);
            gemm(1.0, p.mat().t(), dctx_h, 0.0, dv.mat_mut().cols_slice(h * dh, dh));
            gemm(
                1.0,
                dctx_h,
                cache.v.mat().cols_slice(h * dh, dh).t(),
                0.0,
                dp.mat_mut(),
            );
            // softmax backward: ds = p * (dp - sum_j dp * p)
            for i in 0..t {
                let pr = p.row(i);
                let dr = dp.row_mut(i);
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            gemm(
                scale,
                dp.mat(),
                cache.k.mat().cols_slice(h * dh, dh),
                0.0,
                dq.mat_mut().cols_slice(h * dh, dh),
            );
            gemm(
                scale,
                dp.mat().t(),
                cache.q.mat().cols_slice(h * dh, dh),
                0.0,
                dk.mat_mut().cols_slice(h * dh, dh),
            );
        }
        let mut dx = self.wq.backward(x, &dq, &mut g.wq, base);
        dx.add_assign(&self.wk.backward(x, &dk, &mut g.wk, base));
        dx.add_assign(&self.wv.backward(x, &dv, &mut g.wv, base));
        dx
    }

    /// Causal attention of the new rows `x` (positions `cache.len()..`) over all
    /// cached positions plus themselves. Appends their keys and values to `cache`.
    pub fn forward_step(&self, x: &Tensor, cache: &mut KvCache) -> Tensor {
        let t_new = x.rows();
        let d = self.wq.d_out();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let past = cache.len;
        cache.k.extend_from_slice(&k.data);
        cache.v.extend_from_slice(&v.data);
        cache.len += t_new;
        let total = cache.len;
        let keys = MatRef::new(&cache.k, total, d);
        let values = MatRef::new(&cache.v, total, d);
        let mut ctx = Tensor::zeros(&[t_new, d]);
        for h in 0..self.heads {
            let mut s = Tensor::zeros(&[t_new, total]);
            gemm(
                scale,
                q.mat().cols_slice(h * dh, dh),
                keys.cols_slice(h * dh, dh).t(),
                0.0,
                s.mat_mut(),
            );
            softmax_rows(&mut s, Some(past));
            gemm(
                1.0,
                s.mat(),
                values.cols_slice(h * dh, dh),
                0.0,
                ctx.mat_mut().cols_slice(h * dh, dh),
            );
        }
        self.wo.forward(&ctx)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visit<'a, '_>) {
        for (lin, tag) in [(&self.wq, "q"), (&self.wk, "k"), (&self.wv, "v"), (&self.wo, "o")] {
            lin.visit(&format!("{prefix}.w{tag}"), &format!("{prefix}.b{tag}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        for (lin, tag) in [
            (&mut self.wq, "q"),
            (&mut self.wk, "k"),
            (&mut self.wv, "v"),
            (&mut self.wo, "o"),
        ] {
            lin.visit_mut(&format!("{prefix}.w{tag}"), &format!("{prefix}.b{tag}"), f);
        }
    }
}

/// `Linear -> GELU -> Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(d, hidden, std, rng),
            fc2: Linear::new(hidden, d, std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, MlpCache) {
        let pre = self.fc1.forward(x);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.fc2.forward(&act);
        (y, MlpCache { pre, act })
    }

    pub fn backward(
        &self,
        x: &Tensor,
        cache: &MlpCache,
        dy: &Tensor,
        g: &mut Mlp,
        base: bool,
    ) -> Tensor {
        let mut dact = self.fc2.backward(&cache.act, dy, &mut g.fc2, base);
        for (da, p) in dact.data.iter_mut().zip(&cache.pre.data) {
            *da *= gelu_grad(*p);
        }
        self.fc1.backward(x, &dact, &mut g.fc1, base)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visit<'a, '_>) {
        self.fc1.visit(&format!("{prefix}.w1"), &format!("{prefix}.b1"), f);
        self.fc2.visit(&format!("{prefix}.w2"), &format!("{prefix}.b2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.fc1.visit_mut(&format!("{prefix}.w1"), &format!("{prefix}.b1"), f);
        self.fc2.visit_mut(&format!("{prefix}.w2"), &format!("{prefix}.b2"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    a_in: Tensor,
    attn: AttentionCache,
    ln2: LayerNormCache,
    m_in: Tensor,
    mlp: MlpCache,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(d),
            attn: Attention::new(d, heads, std, rng),
            ln2: LayerNorm::new(d),
            mlp: Mlp::new(d, d * mlp_ratio, std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Block {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Tensor, causal: bool) -> (Tensor, BlockCache) {
        let (a_in, ln1) = self.ln1.forward(x);
        let (a_out, attn) = self.attn.forward(&a_in, causal);
        let mut h = x.clone();
        h.add_assign(&a_out);
        let (m_in, ln2) = self.ln2.forward(&h);
        let (m_out, mlp) = self.mlp.forward(&m_in);
        h.add_assign(&m_out);
        (
            h,
            BlockCache {
                ln1,
                a_in,
                attn,
                ln2,
                m_in,
                mlp,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Tensor, g: &mut Block, base: bool) -> Tensor {
        let dm_in = self.mlp.backward(&cache.m_in, &cache.mlp, dy, &mut g.mlp, base);
        let mut dh = dy.clone();
        dh.add_assign(&self.ln2.backward(&cache.ln2, &dm_in, &mut g.ln2, base));
        let da_in = self
            .attn
            .backward(&cache.a_in, &cache.attn, &dh, &mut g.attn, base);
        let mut dx = dh;
        dx.add_assign(&self.ln1.backward(&cache.ln1, &da_in, &mut g.ln1, base));
        dx
    }

    pub fn forward_step(&self, x: &Tensor, cache: &mut KvCache) -> Tensor {
        let a_in = self.ln1.apply(x);
        let mut h = x.clone();
        h.add_assign(&self.attn.forward_step(&a_in, cache));
        let m_in = self.ln2.apply(&h);
        h.add_assign(&self.mlp.forward(&m_in).0);
        h
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visit<'a, '_>) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }

    /// Number of parameters of a block of width `d` (LoRA excluded).
    pub fn param_count(d: usize, mlp_ratio: usize) -> usize {
        let hidden = d * mlp_ratio;
        2 * (2 * d) + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    }
}
