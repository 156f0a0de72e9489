use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use kpreg::harness::{self, data, eval::EvalOptions, TrainConfig};
use kpreg::keypoints::{KlMode, VarNorm};
use kpreg::model::FeatureExtractor;
use kpreg::synth::{self, TransformKind};
use kpreg::warp::SimilarityKind;

#[derive(Parser)]
#[command(name = "kpreg", version, about = "Keypoint-based volume registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair or time series with ground truth.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of frames; 2 writes a fixed/moving pair.
        #[arg(long, default_value_t = 2)]
        length: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out set defined by the config.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory holding checkpoint.bin and checkpoint.json.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the metrics row as CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the five loss-weight arms.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and the composed objective.
    Gradcheck {
        /// Write the CSV report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Overrides applied on top of `--config` (or the defaults).
#[derive(Args, Default)]
struct ConfigArgs {
    /// Full TrainConfig as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    lambda_var: Option<f64>,
    #[arg(long)]
    lambda_rep: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_kl_mode)]
    kl_mode: Option<KlMode>,
    #[arg(long, value_parser = parse_var_norm)]
    var_norm: Option<VarNorm>,
    #[arg(long, value_parser = parse_similarity)]
    similarity: Option<SimilarityKind>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<TransformKind>,
    /// Cube side of the synthetic grid.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    hidden_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    eval_pairs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Scene and transform seed for `synth`.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_kl_mode(s: &str) -> std::result::Result<KlMode, String> {
    match s {
        "normalised" => Ok(KlMode::Normalised),
        "density" => Ok(KlMode::Density),
        _ => Err(format!("expected normalised|density, got {s}")),
    }
}

fn parse_var_norm(s: &str) -> std::result::Result<VarNorm, String> {
    match s {
        "rms" => Ok(VarNorm::Rms),
        "frobenius" => Ok(VarNorm::Frobenius),
        _ => Err(format!("expected rms|frobenius, got {s}")),
    }
}

fn parse_similarity(s: &str) -> std::result::Result<SimilarityKind, String> {
    match s {
        "mse" => Ok(SimilarityKind::Mse),
        "ncc" => Ok(SimilarityKind::Ncc),
        _ => Err(format!("expected mse|ncc, got {s}")),
    }
}

fn parse_kind(s: &str) -> std::result::Result<TransformKind, String> {
    match s {
        "rigid" => Ok(TransformKind::Rigid),
        "affine" => Ok(TransformKind::Affine),
        _ => Err(format!("expected rigid|affine, got {s}")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.steps, self.steps);
        set!(cfg.batch, self.batch);
        set!(cfg.optimizer.lr, self.lr);
        set!(cfg.weights.lambda_kl, self.lambda_kl);
        set!(cfg.weights.lambda_var, self.lambda_var);
        set!(cfg.weights.lambda_rep, self.lambda_rep);
        set!(cfg.weights.tau, self.tau);
        set!(cfg.kl_mode, self.kl_mode);
        set!(cfg.var_norm, self.var_norm);
        set!(cfg.similarity, self.similarity);
        set!(cfg.transform.kind, self.kind);
        set!(cfg.scene.dims, self.dims.map(|n| [n, n, n]));
        set!(cfg.model.k, self.k);
        set!(cfg.model.hidden_channels, self.hidden_channels);
        set!(cfg.model.depth, self.depth);
        set!(cfg.model.seed, self.model_seed);
        set!(cfg.train_seed, self.train_seed);
        set!(cfg.eval_seed, self.eval_seed);
        set!(cfg.eval_pairs, self.eval_pairs);
        set!(cfg.eval_every, self.eval_every);
        set!(cfg.scene.noise_sigma, self.noise_sigma);
        if let Some(seed) = self.seed {
            cfg.scene.seed = seed;
            cfg.transform.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { cfg, length, out } => {
            let cfg = cfg.resolve()?;
            if length == 2 {
                let pair = synth::generate_pair(&cfg.scene, &cfg.transform)?;
                synth::write_pair(&out, &cfg.scene, &cfg.transform, &pair)?;
            } else {
                let frames = synth::generate_series(&cfg.scene, &cfg.transform, length)?;
                synth::write_series(&out, &cfg.scene, &cfg.transform, &frames)?;
            }
            println!("wrote {length} volumes to {}", out.display());
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            let outcome = harness::train(&cfg, Some(&out))?;
            if let Some(last) = outcome.losses.last() {
                println!("step {}: {}", last.step, serde_json::to_string(&last.loss)?);
            }
            println!(
                "{} steps done, {} skipped; checkpoint in {}",
                outcome.losses.len(),
                outcome.skipped_steps.len(),
                out.display()
            );
        }
        Command::Eval { cfg, checkpoint, out } => {
            let cfg = cfg.resolve()?;
            let model = FeatureExtractor::load(&checkpoint)?;
            let pairs = data::eval_set(&cfg)?;
            let row = harness::evaluate(&model, &pairs, &EvalOptions::from_config(&cfg), "eval")?;
            let csv = harness::metrics_csv(&[row], cfg.transform.kind);
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Ablate { cfg, out } => {
            let cfg = cfg.resolve()?;
            let result = harness::ablate(&cfg, Some(&out))?;
            print!("{}", harness::metrics_csv(&result.rows, cfg.transform.kind));
            println!("eval set sha256 {}", result.eval_hash);
        }
        Command::Gradcheck { out } => {
            let rows = harness::gradcheck_all()?;
            let csv = harness::gradcheck_csv(&rows);
            print!("{csv}");
            if let Some(p) = out {
                write(&p, &csv)?;
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed for: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
