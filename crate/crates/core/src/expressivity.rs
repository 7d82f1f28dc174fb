//! Connector regression probe: can a connector fuse two input streams
//! multiplicatively? Targets are `(A v) * (B q)` for a visual part `v` and a
//! query part `q` of each input row, which no affine map can represent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{fit_linear, ConnectorConfig, ConnectorMode, ConnectorWeights};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWParams};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityConfig {
    pub seed: u64,
    pub visual_dim: usize,
    pub query_dim: usize,
    pub d_out: usize,
    pub d_hid: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ExpressivityConfig {
    fn default() -> Self {
        ExpressivityConfig {
            seed: 0,
            visual_dim: 4,
            query_dim: 4,
            d_out: 4,
            d_hid: 64,
            train_samples: 2048,
            test_samples: 1024,
            steps: 1500,
            lr: 1e-2,
        }
    }
}

impl ExpressivityConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.visual_dim,
            self.query_dim,
            self.d_out,
            self.d_hid,
            self.train_samples,
            self.test_samples,
            self.steps,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("expressivity sizes and steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("expressivity.lr must be positive".into()));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.visual_dim + self.query_dim
    }
}

pub struct RegressionTask {
    pub train_x: Tensor,
    pub train_y: Tensor,
    pub test_x: Tensor,
    pub test_y: Tensor,
}

fn fuse(x: &Tensor, a: &Tensor, b: &Tensor, cfg: &ExpressivityConfig) -> Tensor {
    let n = x.rows();
    let (dv, dq, d_out) = (cfg.visual_dim, cfg.query_dim, cfg.d_out);
    let mut y = Tensor::zeros(&[n, d_out]);
    for i in 0..n {
        let row = x.row(i);
        let pv = matmul(&row[..dv], &a.data, 1, dv, d_out);
        let pq = matmul(&row[dv..], &b.data, 1, dq, d_out);
        for j in 0..d_out {
            y.row_mut(i)[j] = pv[j] * pq[j];
        }
    }
    y
}

pub fn make_task(cfg: &ExpressivityConfig) -> Result<RegressionTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dv, dq, d_out) = (cfg.visual_dim, cfg.query_dim, cfg.d_out);
    let a = Tensor::normal(&[dv, d_out], 1.0 / (dv as f64).sqrt(), &mut rng);
    let b = Tensor::normal(&[dq, d_out], 1.0 / (dq as f64).sqrt(), &mut rng);
    let train_x = Tensor::normal(&[cfg.train_samples, cfg.d_in()], 1.0, &mut rng);
    let test_x = Tensor::normal(&[cfg.test_samples, cfg.d_in()], 1.0, &mut rng);
    Ok(RegressionTask {
        train_y: fuse(&train_x, &a, &b, cfg),
        test_y: fuse(&test_x, &a, &b, cfg),
        train_x,
        test_x,
    })
}

pub fn mse(weights: &ConnectorWeights, x: &Tensor, y: &Tensor) -> Result<f64> {
    let (pred, _) = weights.forward_tokens(x)?;
    Ok(pred.data.iter().zip(&y.data).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Full-batch AdamW on the mean squared error; returns the trained connector.
pub fn train_connector(cfg: &ExpressivityConfig, mode: ConnectorMode, task: &RegressionTask) -> Result<ConnectorWeights> {
    let conn_cfg = ConnectorConfig {
        mode,
        d_vis: cfg.d_in(),
        d_hid: cfg.d_hid,
        d_out: cfg.d_out,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut weights = ConnectorWeights::new(&conn_cfg, &mut rng)?;
    let mut opt = AdamW::default();
    let hp = AdamWParams::new(cfg.lr, 0.0);
    let scale = 2.0 / task.train_y.len() as f64;
    for _ in 0..cfg.steps {
        let (pred, cache) = weights.forward_tokens(&task.train_x)?;
        let mut upstream = pred;
        for (u, t) in upstream.data.iter_mut().zip(&task.train_y.data) {
            *u = (*u - t) * scale;
        }
        let mut grads = weights.zeros_like();
        weights.backward_tokens(&task.train_x, &cache, &upstream, &mut grads);
        let mut gl: Vec<(String, &Tensor)> = Vec::new();
        grads.visit("connector", &mut |n, t| gl.push((n.to_string(), t)));
        opt.advance();
        let mut idx = 0;
        let mut result = Ok(());
        weights.visit_mut("connector", &mut |name, p| {
            if result.is_ok() {
                result = opt.apply(name, p, gl[idx].1, &hp);
            }
            idx += 1;
        });
        result?;
    }
    Ok(weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityReport {
    pub mlp_mse: f64,
    pub linear_mse: f64,
    pub target_variance: f64,
}

impl ExpressivityReport {
    /// How many times lower the MLP's error is than the best affine map's.
    pub fn ratio(&self) -> f64 {
        self.linear_mse / self.mlp_mse
    }
}

/// Held-out errors of the trained MLP connector and the least-squares linear one.
pub fn run_probe(cfg: &ExpressivityConfig) -> Result<ExpressivityReport> {
    let task = make_task(cfg)?;
    let mlp = train_connector(cfg, ConnectorMode::Mlp, &task)?;
    let linear = fit_linear(&task.train_x, &task.train_y)?;
    let n = task.test_y.len() as f64;
    let mean = task.test_y.data.iter().sum::<f64>() / n;
    let target_variance = task.test_y.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(ExpressivityReport {
        mlp_mse: mse(&mlp, &task.test_x, &task.test_y)?,
        linear_mse: mse(&linear, &task.test_x, &task.test_y)?,
        target_variance,
    })
}
