use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fefa::audio::{NoiseKind, NoiseSpec};
use fefa::harness::{
    cmd_evaluate, cmd_export_attention, cmd_robustness, cmd_synth_corpus, cmd_train,
    sweep_conditions, ExperimentConfig, CHECKPOINT_DIR,
};
use fefa::{Error, Result};

/// Speaker verification experiments with per-frequency-bin attention.
#[derive(Parser)]
#[command(name = "fefa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (WAV files, manifest, trial list).
    SynthCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; --checkpoint resumes from an earlier checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the trial list with a trained model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
        /// Evaluate clean audio and every condition of the noise grid.
        #[arg(long, conflicts_with = "noise")]
        grid: bool,
    },
    /// Compare checkpoints (baseline first) across the noise grid.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1)]
        checkpoint: Vec<PathBuf>,
    },
    /// Export the input attention map and normalized spectrogram of a WAV file.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long, requires = "snr_db")]
    noise: Option<NoiseKind>,
    #[arg(long, requires = "noise", allow_negative_numbers = true)]
    snr_db: Option<f64>,
}

impl NoiseArgs {
    fn spec(&self) -> Option<NoiseSpec> {
        Some(NoiseSpec::new(self.noise?, self.snr_db?))
    }
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::SynthCorpus { common } => {
            let (cfg, out) = common.load()?;
            let m = cmd_synth_corpus(&cfg, &out)?;
            Ok(json!({ "corpus": out, "utterances": m.entries.len() }))
        }
        Command::Train { common, checkpoint } => {
            let (cfg, out) = common.load()?;
            let run = cmd_train(&cfg, &out, checkpoint.as_deref())?;
            let last = run.log.last();
            Ok(json!({
                "checkpoint": out.join(CHECKPOINT_DIR),
                "epochs": run.log.len(),
                "loss": last.map(|r| r.loss),
                "train_accuracy": last.map(|r| r.train_accuracy),
            }))
        }
        Command::Evaluate { common, checkpoint, noise, grid } => {
            let (cfg, out) = common.load()?;
            let conditions = if grid {
                sweep_conditions(&cfg.noise)
            } else {
                vec![noise.spec()]
            };
            let summaries = cmd_evaluate(&cfg, &checkpoint, &conditions, &out)?;
            Ok(json!({ "out": out, "results": summaries }))
        }
        Command::Robustness { common, checkpoint } => {
            let (cfg, out) = common.load()?;
            let (rows, degradation) = cmd_robustness(&cfg, &checkpoint, &out)?;
            Ok(json!({ "out": out, "rows": rows.len(), "degradation": degradation }))
        }
        Command::ExportAttention { checkpoint, wav, noise, seed, out } => {
            let export = cmd_export_attention(&checkpoint, &wav, noise.spec().as_ref(), seed, &out)?;
            Ok(json!({ "out": out, "bins": export.map.p.len() }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default();
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
