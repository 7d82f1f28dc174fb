//! Low-rank adapters on frozen projection matrices.
//!
//! For a base map `y = x W` with `W: [d_in, d_out]` the adapter adds
//! `(alpha / r) * x A^T B^T`, i.e. the effective weight is `W + (alpha / r) (B A)^T`
//! with `A: [r, d_in]`, `B: [d_out, r]`. `B` starts at zero so an attached
//! adapter leaves the host's outputs untouched.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(
        target: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        LoraAdapter {
            target: target.to_string(),
            rank,
            alpha,
            a: Tensor::normal(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out, rank]),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn zeros_like(&self) -> Self {
        LoraAdapter {
            target: self.target.clone(),
            rank: self.rank,
            alpha: self.alpha,
            a: self.a.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    /// `x A^T`, shape `[t, r]`.
    pub(crate) fn down(&self, x: &Tensor) -> Tensor {
        let mut h = Tensor::zeros(&[x.rows(), self.rank]);
        gemm(1.0, x.mat(), self.a.mat().t(), 0.0, h.mat_mut());
        h
    }

    /// The low-rank weight delta `(alpha / r) A^T B^T`, shaped like the host weight.
    pub fn delta(&self) -> Tensor {
        let d_in = self.a.shape[1];
        let d_out = self.b.shape[0];
        let mut w = Tensor::zeros(&[d_in, d_out]);
        gemm(self.scale(), self.a.mat().t(), self.b.mat().t(), 0.0, w.mat_mut());
        w
    }
}

/// A model whose attention projections can carry adapters.
pub trait LoraHost {
    /// Every projection that accepts an adapter, keyed by its parameter name.
    fn lora_slots(&mut self) -> Vec<(String, &mut Linear)>;
}

/// Attaches a fresh adapter to each named projection.
pub fn attach_lora<H: LoraHost + ?Sized, R: Rng + ?Sized>(
    host: &mut H,
    targets: &[String],
    rank: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    let mut slots = host.lora_slots();
    for target in targets {
        let Some((name, lin)) = slots.iter_mut().find(|(name, _)| name == target) else {
            let valid: Vec<_> = host_names(&slots);
            return Err(Error::Config(format!(
                "unknown LoRA target {target:?}; valid targets: {}",
                valid.join(", ")
            )));
        };
        if lin.lora.is_some() {
            return Err(Error::Config(format!("LoRA already attached to {name}")));
        }
        let (d_in, d_out) = (lin.d_in(), lin.d_out());
        lin.lora = Some(LoraAdapter::new(name, d_in, d_out, rank, alpha, rng));
    }
    Ok(())
}

fn host_names(slots: &[(String, &mut Linear)]) -> Vec<String> {
    slots.iter().map(|(n, _)| n.clone()).collect()
}

/// Folds every attached adapter into its base weight and detaches it.
pub fn merge_lora<H: LoraHost + ?Sized>(host: &mut H) {
    for (_, lin) in host.lora_slots() {
        if let Some(lora) = lin.lora.take() {
            lin.w.add_assign(&lora.delta());
        }
    }
}

/// Clones of the attached adapters, in slot order.
pub fn adapters<H: LoraHost + ?Sized>(host: &mut H) -> Vec<LoraAdapter> {
    host.lora_slots()
        .into_iter()
        .filter_map(|(_, lin)| lin.lora.clone())
        .collect()
}
