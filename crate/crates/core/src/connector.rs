//! Vision-language connector: maps patch features into the decoder's
//! embedding space, token by token.
//!
//! * `mlp`: `V = GELU(I W1 + b1) W2 + b2`, exact erf-based GELU.
//! * `linear`: `V = I W + b`, the single-projection baseline.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::nn::{gelu, gelu_grad};
use crate::nn::{Visit, VisitMut};
use crate::tensor::{gemm, Tensor};
use crate::vision_encoder::{join, PatchFeatures};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectorMode {
    Mlp,
    Linear,
}

impl fmt::Display for ConnectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConnectorMode::Mlp => "mlp",
            ConnectorMode::Linear => "linear",
        })
    }
}

impl FromStr for ConnectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ConnectorMode::Mlp),
            "linear" => Ok(ConnectorMode::Linear),
            other => Err(Error::Config(format!(
                "connector mode must be `mlp` or `linear`, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub mode: ConnectorMode,
    pub d_vis: usize,
    /// Hidden width of the MLP; ignored in linear mode.
    pub d_hid: usize,
    pub d_out: usize,
}

impl ConnectorConfig {
    /// MLP connector with the default `d_hid = 4 * d_vis`.
    pub fn mlp(d_vis: usize, d_out: usize) -> Self {
        ConnectorConfig {
            mode: ConnectorMode::Mlp,
            d_vis,
            d_hid: 4 * d_vis,
            d_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_vis == 0 || self.d_out == 0 || (self.mode == ConnectorMode::Mlp && self.d_hid == 0) {
            return Err(Error::Config("connector widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConnectorWeights {
    Mlp {
        /// `[d_vis, d_hid]`
        w1: Tensor,
        b1: Tensor,
        /// `[d_hid, d_out]`
        w2: Tensor,
        b2: Tensor,
    },
    Linear {
        /// `[d_vis, d_out]`
        w: Tensor,
        b: Tensor,
    },
}

/// Visual embedding sequence `B x N x d_out`.
pub type VisualEmbedding = PatchFeatures;

/// Per-image intermediates kept for the backward pass.
pub struct ConnectorCache {
    pre: Option<Tensor>,
    hidden: Option<Tensor>,
}

impl ConnectorWeights {
    pub fn new<R: Rng + ?Sized>(config: &ConnectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(match config.mode {
            ConnectorMode::Mlp => ConnectorWeights::Mlp {
                w1: Tensor::trunc_normal(&[config.d_vis, config.d_hid], INIT_STD, rng),
                b1: Tensor::zeros(&[config.d_hid]),
                w2: Tensor::trunc_normal(&[config.d_hid, config.d_out], INIT_STD, rng),
                b2: Tensor::zeros(&[config.d_out]),
            },
            ConnectorMode::Linear => ConnectorWeights::Linear {
                w: Tensor::trunc_normal(&[config.d_vis, config.d_out], INIT_STD, rng),
                b: Tensor::zeros(&[config.d_out]),
            },
        })
    }

    pub fn mode(&self) -> ConnectorMode {
        match self {
            ConnectorWeights::Mlp { .. } => ConnectorMode::Mlp,
            ConnectorWeights::Linear { .. } => ConnectorMode::Linear,
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            ConnectorWeights::Mlp { w1, .. } => w1.shape[0],
            ConnectorWeights::Linear { w, .. } => w.shape[0],
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            ConnectorWeights::Mlp { w2, .. } => w2.shape[1],
            ConnectorWeights::Linear { w, .. } => w.shape[1],
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            ConnectorWeights::Mlp { w1, b1, w2, b2 } => ConnectorWeights::Mlp {
                w1: w1.zeros_like(),
                b1: b1.zeros_like(),
                w2: w2.zeros_like(),
                b2: b2.zeros_like(),
            },
            ConnectorWeights::Linear { w, b } => ConnectorWeights::Linear {
                w: w.zeros_like(),
                b: b.zeros_like(),
            },
        }
    }

    fn check_input(&self, d: usize) -> Result<()> {
        if d != self.d_in() {
            return Err(Error::shape("connector input width", self.d_in(), d));
        }
        Ok(())
    }

    /// Maps one image's `[N, d_vis]` tokens to `[N, d_out]`.
    pub fn forward_tokens(&self, input: &Tensor) -> Result<(Tensor, ConnectorCache)> {
        self.check_input(input.cols())?;
        Ok(match self {
            ConnectorWeights::Mlp { w1, b1, w2, b2 } => {
                let pre = affine(input, w1, b1);
                let mut hidden = pre.clone();
                hidden.data.iter_mut().for_each(|v| *v = gelu(*v));
                let out = affine(&hidden, w2, b2);
                (
                    out,
                    ConnectorCache {
                        pre: Some(pre),
                        hidden: Some(hidden),
                    },
                )
            }
            ConnectorWeights::Linear { w, b } => (
                affine(input, w, b),
                ConnectorCache {
                    pre: None,
                    hidden: None,
                },
            ),
        })
    }

    /// Returns `dL/dI` for one image and accumulates weight gradients into `grads`.
    pub fn backward_tokens(
        &self,
        input: &Tensor,
        cache: &ConnectorCache,
        upstream: &Tensor,
        grads: &mut ConnectorWeights,
    ) -> Tensor {
        let n = input.rows();
        match (self, grads) {
            (
                ConnectorWeights::Mlp { w1, w2, .. },
                ConnectorWeights::Mlp {
                    w1: g1,
                    b1: gb1,
                    w2: g2,
                    b2: gb2,
                },
            ) => {
                let hidden = cache.hidden.as_ref().expect("mlp cache");
                let pre = cache.pre.as_ref().expect("mlp cache");
                gemm(1.0, hidden.mat().t(), upstream.mat(), 1.0, g2.mat_mut());
                add_col_sums(gb2, upstream);
                let mut dh = Tensor::zeros(&[n, w1.shape[1]]);
                gemm(1.0, upstream.mat(), w2.mat().t(), 0.0, dh.mat_mut());
                for (d, p) in dh.data.iter_mut().zip(&pre.data) {
                    *d *= gelu_grad(*p);
                }
                gemm(1.0, input.mat().t(), dh.mat(), 1.0, g1.mat_mut());
                add_col_sums(gb1, &dh);
                let mut dx = Tensor::zeros(&[n, w1.shape[0]]);
                gemm(1.0, dh.mat(), w1.mat().t(), 0.0, dx.mat_mut());
                dx
            }
            (ConnectorWeights::Linear { w, .. }, ConnectorWeights::Linear { w: gw, b: gb }) => {
                gemm(1.0, input.mat().t(), upstream.mat(), 1.0, gw.mat_mut());
                add_col_sums(gb, upstream);
                let mut dx = Tensor::zeros(&[n, w.shape[0]]);
                gemm(1.0, upstream.mat(), w.mat().t(), 0.0, dx.mat_mut());
                dx
            }
            _ => panic!("gradient buffer mode differs from connector mode"),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visit<'a, '_>) {
        match self {
            ConnectorWeights::Mlp { w1, b1, w2, b2 } => {
                f(&join(prefix, "w1"), w1);
                f(&join(prefix, "b1"), b1);
                f(&join(prefix, "w2"), w2);
                f(&join(prefix, "b2"), b2);
            }
            ConnectorWeights::Linear { w, b } => {
                f(&join(prefix, "w"), w);
                f(&join(prefix, "b"), b);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        match self {
            ConnectorWeights::Mlp { w1, b1, w2, b2 } => {
                f(&join(prefix, "w1"), w1);
                f(&join(prefix, "b1"), b1);
                f(&join(prefix, "w2"), w2);
                f(&join(prefix, "b2"), b2);
            }
            ConnectorWeights::Linear { w, b } => {
                f(&join(prefix, "w"), w);
                f(&join(prefix, "b"), b);
            }
        }
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.rows();
    let mut y = Tensor::zeros(&[n, w.shape[1]]);
    for i in 0..n {
        y.row_mut(i).copy_from_slice(&b.data);
    }
    gemm(1.0, x.mat(), w.mat(), 1.0, y.mat_mut());
    y
}

fn add_col_sums(acc: &mut Tensor, m: &Tensor) {
    for i in 0..m.rows() {
        for (a, v) in acc.data.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
}

/// Applies the connector to every image of the batch.
pub fn connect(features: &PatchFeatures, weights: &ConnectorWeights) -> Result<VisualEmbedding> {
    weights.check_input(features.dim)?;
    let outs = (0..features.batch)
        .map(|b| weights.forward_tokens(&features.image(b)).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    let mut v = PatchFeatures::from_images(outs);
    if features.batch == 0 {
        v.tokens = features.tokens;
        v.dim = weights.d_out();
    }
    Ok(v)
}

/// Exact reverse-mode gradients of [`connect`].
pub fn connect_backward(
    features: &PatchFeatures,
    weights: &ConnectorWeights,
    upstream: &VisualEmbedding,
) -> Result<(PatchFeatures, ConnectorWeights)> {
    weights.check_input(features.dim)?;
    if upstream.batch != features.batch
        || upstream.tokens != features.tokens
        || upstream.dim != weights.d_out()
    {
        return Err(Error::shape(
            "connector upstream gradient",
            format!("{}x{}x{}", features.batch, features.tokens, weights.d_out()),
            format!("{}x{}x{}", upstream.batch, upstream.tokens, upstream.dim),
        ));
    }
    let mut grads = weights.zeros_like();
    let mut grad_in = Vec::with_capacity(features.batch);
    for b in 0..features.batch {
        let input = features.image(b);
        let (_, cache) = weights.forward_tokens(&input)?;
        grad_in.push(weights.backward_tokens(&input, &cache, &upstream.image(b), &mut grads));
    }
    Ok((PatchFeatures::from_images(grad_in), grads))
}

/// Least-squares optimal linear connector for `targets ≈ inputs W + b`
/// (minimum-norm solution via SVD).
pub fn fit_linear(inputs: &Tensor, targets: &Tensor) -> Result<ConnectorWeights> {
    let (m, d_in, d_out) = (inputs.rows(), inputs.cols(), targets.cols());
    if targets.rows() != m {
        return Err(Error::shape("least-squares targets", m, targets.rows()));
    }
    let design = DMatrix::from_fn(m, d_in + 1, |i, j| {
        if j < d_in {
            inputs.data[i * d_in + j]
        } else {
            1.0
        }
    });
    let rhs = DMatrix::from_fn(m, d_out, |i, j| targets.data[i * d_out + j]);
    let solution = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Domain(format!("least squares failed: {e}")))?;
    let w = Tensor::from_vec(
        &[d_in, d_out],
        (0..d_in)
            .flat_map(|i| (0..d_out).map(move |j| (i, j)))
            .map(|(i, j)| solution[(i, j)])
            .collect(),
    );
    let b = Tensor::from_vec(&[d_out], (0..d_out).map(|j| solution[(d_in, j)]).collect());
    Ok(ConnectorWeights::Linear { w, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(batch: usize, tokens: usize, dim: usize, seed: u64) -> PatchFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::normal(&[batch * tokens, dim], 1.0, &mut rng);
        PatchFeatures {
            batch,
            tokens,
            dim,
            data: t.data,
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ConnectorWeights::new(&ConnectorConfig::mlp(8, 8), &mut rng).unwrap();
        let zeros = PatchFeatures {
            batch: 2,
            tokens: 3,
            dim: 8,
            data: vec![0.0; 48],
        };
        let v = connect(&zeros, &w).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_linear_is_identity() {
        let d = 5;
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data[i * d + i] = 1.0;
        }
        let weights = ConnectorWeights::Linear {
            w,
            b: Tensor::zeros(&[d]),
        };
        let input = features(2, 4, d, 3);
        assert_eq!(connect(&input, &weights).unwrap(), input);
    }

    #[test]
    fn width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ConnectorWeights::new(&ConnectorConfig::mlp(8, 8), &mut rng).unwrap();
        assert!(matches!(connect(&features(1, 2, 6, 0), &w), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = ConnectorWeights::new(&ConnectorConfig::mlp(4, 6), &mut rng).unwrap();
        let input = features(2, 3, 4, 5);
        let upstream = PatchFeatures {
            batch: 2,
            tokens: 3,
            dim: 6,
            data: vec![0.0; 36],
        };
        let (gi, gw) = connect_backward(&input, &w, &upstream).unwrap();
        assert!(gi.data.iter().all(|&v| v == 0.0));
        gw.visit("", &mut |_, t| assert!(t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn least_squares_recovers_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::normal(&[40, 3], 1.0, &mut rng);
        let truth = ConnectorWeights::Linear {
            w: Tensor::normal(&[3, 2], 1.0, &mut rng),
            b: Tensor::from_vec(&[2], vec![0.5, -1.0]),
        };
        let (y, _) = truth.forward_tokens(&x).unwrap();
        let fit = fit_linear(&x, &y).unwrap();
        let mut max_diff = 0.0f64;
        fit.visit("", &mut |name, t| {
            let mut other = None;
            truth.visit("", &mut |n, u| {
                if n == name {
                    other = Some(u.clone())
                }
            });
            for (a, b) in t.data.iter().zip(&other.unwrap().data) {
                max_diff = max_diff.max((a - b).abs());
            }
        });
        assert!(max_diff < 1e-10);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mlp".parse::<ConnectorMode>().unwrap(), ConnectorMode::Mlp);
        assert_eq!("linear".parse::<ConnectorMode>().unwrap(), ConnectorMode::Linear);
        assert!("conv".parse::<ConnectorMode>().is_err());
    }
}
