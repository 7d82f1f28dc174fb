//! End-to-end workflows shared by the command line and the tests.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::connector::ConnectorMode;
use crate::error::Result;
use crate::metrics::{evaluate, EvalReport, Prediction};
use crate::model::KeypointModel;
use crate::prompt_codec::NUM_KEYPOINTS;
use crate::synth_data::{generate_sample, SkeletonSample};
use crate::trainer::{TrainState, Trainer};

/// `(train, val)` samples described by the config.
pub fn generate_splits(cfg: &RunConfig) -> Result<(Vec<SkeletonSample>, Vec<SkeletonSample>)> {
    cfg.generator.validate()?;
    let (n_train, _) = cfg.data.split_counts();
    let all = (0..cfg.data.count)
        .map(|i| generate_sample(cfg.data.sample_seed(i), &cfg.generator))
        .collect::<Result<Vec<_>>>()?;
    let val = all[n_train..].to_vec();
    let mut train = all;
    train.truncate(n_train);
    Ok((train, val))
}

/// Freshly initialized model for the config, adapters attached.
pub fn init_model(cfg: &RunConfig) -> Result<KeypointModel> {
    cfg.validate()?;
    KeypointModel::new(cfg.model_config(), Some(&cfg.train.lora), cfg.train.seed)
}

/// Trains a fresh model over all configured epochs.
pub fn train_model(
    cfg: &RunConfig,
    data: &[SkeletonSample],
    on_step: impl FnMut(u64, f64),
) -> Result<(KeypointModel, TrainState)> {
    let mut model = init_model(cfg)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &model, data)?;
    trainer.run(&mut model, None, on_step)?;
    Ok((model, trainer.state))
}

/// Greedy predictions for every keypoint of every sample.
pub fn predict_samples(model: &KeypointModel, samples: &[SkeletonSample], max_answer_len: usize) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| {
            let visual = model.visual_tokens(&s.image())?;
            let mut coords = [None; NUM_KEYPOINTS];
            for (k, c) in coords.iter_mut().enumerate() {
                *c = model.decode(&visual, k, max_answer_len)?.coords;
            }
            Ok(Prediction { id: s.seed, coords })
        })
        .collect()
}

/// The first `eval.samples` samples (all when 0).
pub fn eval_subset<'a>(cfg: &RunConfig, samples: &'a [SkeletonSample]) -> &'a [SkeletonSample] {
    match cfg.eval.samples {
        0 => samples,
        n => &samples[..n.min(samples.len())],
    }
}

pub fn evaluate_model(cfg: &RunConfig, model: &KeypointModel, samples: &[SkeletonSample]) -> Result<(Vec<Prediction>, EvalReport)> {
    let predictions = predict_samples(model, samples, cfg.eval.max_answer_len)?;
    let report = evaluate(&predictions, samples, &cfg.metrics)?;
    Ok((predictions, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: ConnectorMode,
    /// One report per seed, in seed order.
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        self.reports.iter().map(f).sum::<f64>() / self.reports.len().max(1) as f64
    }

    pub fn mean_ap(&self) -> f64 {
        self.mean(|r| r.ap)
    }
}

/// Trains and evaluates both connectors on identical data for each seed.
pub fn ablate(
    cfg: &RunConfig,
    seeds: &[u64],
    mut progress: impl FnMut(ConnectorMode, u64),
) -> Result<Vec<AblationRow>> {
    let mut rows = vec![
        AblationRow {
            mode: ConnectorMode::Mlp,
            reports: Vec::new(),
        },
        AblationRow {
            mode: ConnectorMode::Linear,
            reports: Vec::new(),
        },
    ];
    for &seed in seeds {
        let base = cfg.clone().with_seed(seed);
        base.validate()?;
        let (train, val) = generate_splits(&base)?;
        let eval_set = if val.is_empty() { &train[..] } else { &val[..] };
        let eval_set = eval_subset(&base, eval_set);
        for row in rows.iter_mut() {
            progress(row.mode, seed);
            let run = base.clone().with_connector(row.mode);
            let (model, _) = train_model(&run, &train, |_, _| {})?;
            let (_, report) = evaluate_model(&run, &model, eval_set)?;
            row.reports.push(report);
        }
    }
    Ok(rows)
}

/// Side-by-side table of seed-averaged metrics.
pub fn format_ablation(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut s = String::new();
    let seed_list: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(s, "seeds: {}", seed_list.join(","));
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:>6} {:>6} {:>6} {:>9} {:>9}",
        "connector", "AP", "AP50", "AP75", "AR", "PCKh@0.5", "PCKh@0.1"
    );
    for row in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>9.1} {:>9.1}",
            row.mode.to_string(),
            row.mean(|r| r.ap),
            row.mean(|r| r.ap50),
            row.mean(|r| r.ap75),
            row.mean(|r| r.ar),
            row.mean(|r| r.pckh_05),
            row.mean(|r| r.pckh_01)
        );
    }
    s
}
