use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::{GrayImage, Rgb, RgbImage};

use keyloc_core::checkpoint;
use keyloc_core::config::RunConfig;
use keyloc_core::connector::ConnectorMode;
use keyloc_core::error::{Error, Result};
use keyloc_core::metrics::{evaluate, format_predictions, parse_predictions};
use keyloc_core::pipeline;
use keyloc_core::prompt_codec::{build_prompt, KeypointCatalog};
use keyloc_core::synth_data::{read_dataset, write_dataset, SkeletonSample};
use keyloc_core::trainer::{format_loss_curve, Trainer};

/// Saved next to the weights so `eval` and `predict` can rebuild the run.
const RUN_CONFIG_FILE: &str = "run.cfg";
const LOSS_FILE: &str = "loss.tsv";

#[derive(Parser)]
#[command(name = "keyloc", version, about = "Language-guided keypoint localization on synthetic stick figures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file, or a preset name: desk, full, expressivity.
    #[arg(long, default_value = "desk")]
    config: String,
    /// Overrides both the data seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    connector: Option<ConnectorMode>,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes train/val datasets.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model and writes a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint that carries training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decodes every keypoint of every sample and scores the predictions.
    Eval {
        /// Config to check the checkpoint against; the checkpoint's own run config when omitted.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to evaluate; the config's validation split when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score this predictions file instead of decoding.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localizes one keypoint in one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grayscale PNG of the model's input size.
        #[arg(long, conflicts_with = "data")]
        image: Option<PathBuf>,
        /// Dataset file; use with --index.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        keypoint: String,
        /// Writes the image with a cross at the prediction.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains and evaluates both connectors over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<ConnectorMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(spec: &str) -> Result<RunConfig> {
    let path = Path::new(spec);
    if path.exists() {
        RunConfig::load(path)
    } else if spec.contains('/') || spec.ends_with(".cfg") {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
        })
    } else {
        RunConfig::preset(spec)
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(mode) = self.connector {
            cfg = cfg.with_connector(mode);
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg = cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

fn cmd_generate(common: &Common, count: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(n) = count {
        cfg.data.count = n;
        cfg.validate()?;
    }
    let (train, val) = pipeline::generate_splits(&cfg)?;
    create_dir(out)?;
    let hash = cfg.generator.hash();
    write_dataset(&train, &out.join("train.jsonl"), "train", &hash)?;
    write_dataset(&val, &out.join("val.jsonl"), "val", &hash)?;
    println!("train {}", train.len());
    println!("val {}", val.len());
    Ok(())
}

fn cmd_train(
    common: &Common,
    data: Option<&Path>,
    resume: Option<&Path>,
    max_steps: Option<u64>,
    out: &Path,
) -> Result<()> {
    let cfg = common.resolve()?;
    let samples = match data {
        Some(p) => read_dataset(p)?,
        None => pipeline::generate_splits(&cfg)?.0,
    };
    let (mut model, mut trainer) = match resume {
        Some(dir) => {
            let loaded = checkpoint::load(dir)?;
            if loaded.manifest.config_hash != cfg.model_config().hash() {
                return Err(Error::Integrity(format!(
                    "{} was trained with a different model config",
                    dir.display()
                )));
            }
            let (_, state) = loaded
                .state
                .ok_or_else(|| Error::Integrity(format!("{} holds no training state", dir.display())))?;
            let trainer = Trainer::resume(cfg.train.clone(), state, &loaded.model, &samples)?;
            (loaded.model, trainer)
        }
        None => {
            let model = pipeline::init_model(&cfg)?;
            let trainer = Trainer::new(cfg.train.clone(), &model, &samples)?;
            (model, trainer)
        }
    };
    let total = trainer.total_steps();
    trainer.run(&mut model, max_steps, |step, loss| {
        eprintln!("step {step}/{total} loss {loss:.5}");
    })?;
    checkpoint::save(out, &model, Some((&cfg.train, &trainer.state)))?;
    write(&out.join(RUN_CONFIG_FILE), &cfg.to_text())?;
    write(&out.join(LOSS_FILE), &format_loss_curve(&trainer.state.losses))?;
    if let (Some(first), Some(last)) = (trainer.state.losses.first(), trainer.state.losses.last()) {
        println!("steps {} initial loss {:.5} final loss {:.5}", last.0, first.1, last.1);
    }
    Ok(())
}

/// The run config stored with a checkpoint, or defaults around its model config.
fn checkpoint_config(dir: &Path, manifest: &checkpoint::Manifest) -> Result<RunConfig> {
    let path = dir.join(RUN_CONFIG_FILE);
    let mut cfg = if path.exists() {
        RunConfig::load(&path)?
    } else {
        RunConfig::default()
    };
    cfg.encoder = manifest.model.encoder.clone();
    cfg.connector = manifest.model.connector.clone();
    cfg.decoder = manifest.model.decoder.clone();
    cfg.train.connector_mode = cfg.connector.mode;
    cfg.generator.image_size = cfg.encoder.image_size;
    Ok(cfg)
}

fn cmd_eval(
    config: Option<&str>,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let loaded = ckpt.map(checkpoint::load).transpose()?;
    let cfg = match (config, &loaded, ckpt) {
        (Some(spec), Some(l), _) => {
            let cfg = load_config(spec)?;
            cfg.validate()?;
            if cfg.model_config().hash() != l.manifest.config_hash {
                return Err(Error::Integrity(
                    "checkpoint was built for a different model config".into(),
                ));
            }
            cfg
        }
        (Some(spec), None, _) => load_config(spec)?,
        (None, Some(l), Some(dir)) => checkpoint_config(dir, &l.manifest)?,
        _ => RunConfig::preset("desk")?,
    };
    let samples: Vec<SkeletonSample> = match data {
        Some(p) => read_dataset(p)?,
        None => {
            let (train, val) = pipeline::generate_splits(&cfg)?;
            if val.is_empty() {
                train
            } else {
                val
            }
        }
    };
    let samples = pipeline::eval_subset(&cfg, &samples);
    let preds = match (predictions, &loaded) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(Error::io(p))?;
            parse_predictions(&text, p)?
        }
        (None, Some(l)) => pipeline::predict_samples(&l.model, samples, cfg.eval.max_answer_len)?,
        (None, None) => {
            return Err(Error::Config("eval needs --checkpoint or --predictions".into()));
        }
    };
    let report = evaluate(&preds, samples, &cfg.metrics)?;
    create_dir(out)?;
    write(&out.join("predictions.tsv"), &format_predictions(&preds))?;
    write(&out.join("report.txt"), &report.table())?;
    write(&out.join("report.tsv"), &report.key_values())?;
    print!("{}", report.table());
    Ok(())
}

fn load_png(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?
        .to_luma8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::Config(format!(
            "{} is {}x{}, the model expects {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img.pixels().map(|p| p.0[0] as f64 / 255.0).collect())
}

fn write_marker(image: &[f64], size: usize, at: Option<(f64, f64)>, path: &Path) -> Result<()> {
    let gray = GrayImage::from_fn(size as u32, size as u32, |x, y| {
        image::Luma([(image[y as usize * size + x as usize] * 255.0).round() as u8])
    });
    let mut rgb: RgbImage = image::DynamicImage::ImageLuma8(gray).to_rgb8();
    if let Some((x, y)) = at {
        let cx = (x * size as f64).floor() as i64;
        let cy = (y * size as f64).floor() as i64;
        for d in -2i64..=2 {
            for (px, py) in [(cx + d, cy), (cx, cy + d)] {
                if (0..size as i64).contains(&px) && (0..size as i64).contains(&py) {
                    rgb.put_pixel(px as u32, py as u32, Rgb([255, 0, 0]));
                }
            }
        }
    }
    rgb.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

fn cmd_predict(
    ckpt: &Path,
    image_path: Option<&Path>,
    data: Option<&Path>,
    index: usize,
    keypoint: &str,
    out: Option<&Path>,
) -> Result<()> {
    let k = KeypointCatalog::builtin().index_of(keypoint)?;
    let loaded = checkpoint::load(ckpt)?;
    let size = loaded.model.config.encoder.image_size;
    let image = match (image_path, data) {
        (Some(p), _) => load_png(p, size)?,
        (None, Some(d)) => {
            let samples = read_dataset(d)?;
            samples
                .get(index)
                .ok_or_else(|| Error::Domain(format!("{} has {} samples", d.display(), samples.len())))?
                .image()
        }
        (None, None) => return Err(Error::Config("predict needs --image or --data".into())),
    };
    let visual = loaded.model.visual_tokens(&image)?;
    let result = loaded.model.decode(&visual, k, keyloc_core::model::ANSWER_TOKENS)?;
    println!("prompt: {}", build_prompt(k)?);
    match result.coords {
        Some((x, y)) => println!("{keypoint}: x={x:.3} y={y:.3}"),
        None => println!("{keypoint}: parse failure"),
    }
    if let Some(p) = out {
        write_marker(&image, size, result.coords, p)?;
    }
    Ok(())
}

fn cmd_ablate(common: &Common, seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let rows = pipeline::ablate(&cfg, seeds, |mode, seed| eprintln!("training {mode} seed {seed}"))?;
    let table = pipeline::format_ablation(&rows, seeds);
    print!("{table}");
    if let Some(p) = out {
        write(p, &table)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Shape { .. }
        | Error::Domain(_)
        | Error::Tokenize(_)
        | Error::Capacity { .. } => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::Io { .. } | Error::Parse { .. } | Error::Integrity(_) | Error::Version { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { common, count, out } => cmd_generate(common, *count, out),
        Command::Train {
            common,
            data,
            resume,
            max_steps,
            out,
        } => cmd_train(common, data.as_deref(), resume.as_deref(), *max_steps, out),
        Command::Eval {
            config,
            checkpoint,
            data,
            predictions,
            out,
        } => cmd_eval(
            config.as_deref(),
            checkpoint.as_deref(),
            data.as_deref(),
            predictions.as_deref(),
            out,
        ),
        Command::Predict {
            checkpoint,
            image,
            data,
            index,
            keypoint,
            out,
        } => cmd_predict(checkpoint, image.as_deref(), data.as_deref(), *index, keypoint, out.as_deref()),
        Command::Ablate { common, seeds, out } => cmd_ablate(common, seeds, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
