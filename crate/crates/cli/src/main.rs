use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slipnap_core::fusion::ModalityMask;
use slipnap_core::pipeline::{cmd_ablate, cmd_eval, cmd_generate, cmd_score_stream, cmd_train, ModelBundle, PipelineConfig};
use slipnap_core::streamsync::{format_frame_ndjson, read_episode};
use slipnap_core::{Error, Result};

/// Multimodal slip detection: simulate, train, evaluate and stream.
#[derive(Parser)]
#[command(name = "slipnap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        let cfg = match self.seed {
            Some(seed) => cfg.with_seed(seed),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write episodes plus manifest.tsv.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on the train split; threshold from the val split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Modalities the detector is trained on.
        #[arg(long, default_value = "all")]
        mask: ModalityMask,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the eval split under one or more masks and write reports.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Repeatable, e.g. `--mask all --mask ft`.
        #[arg(long, default_value = "all")]
        mask: Vec<ModalityMask>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read NDJSON frames on stdin, write one scored tick per line.
    ScoreStream {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "all")]
        mask: ModalityMask,
    },
    /// Train and evaluate one detector per mask; writes the comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to all, ft, rgb, depth, mic.
        #[arg(long)]
        mask: Vec<ModalityMask>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print an episode directory as time-ordered NDJSON frames.
    Replay {
        #[arg(long)]
        episode: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { cfg, out } => {
            let summary = cmd_generate(&cfg.load()?, &out)?;
            let [train, val, eval] = summary.counts;
            println!(
                "{} episodes (train {train}, val {val}, eval {eval}) -> {}",
                train + val + eval,
                summary.manifest_path.display()
            );
        }
        Command::Train { cfg, manifest, mask, out } => {
            let outcome = cmd_train(&cfg.load()?, &manifest, mask, &out)?;
            let b = &outcome.bundle;
            println!(
                "trained {mask}: best epoch {}, val loss {:.4e}, kept rank {}, threshold {} -> {}",
                b.train_log.best_epoch,
                b.train_log.best_val_loss,
                b.nap.kept_rank(),
                b.threshold().map_or("unset".into(), |t| format!("{t:.6e}")),
                out.join("model.bundle").display()
            );
        }
        Command::Eval { bundle, manifest, mask, out } => {
            let bundle = ModelBundle::load(&bundle)?;
            let table = cmd_eval(&bundle, &manifest, &mask, &out)?;
            print!("{table}");
        }
        Command::ScoreStream { bundle, mask } => {
            let bundle = ModelBundle::load(&bundle)?;
            let stdin = io::stdin().lock();
            let mut stdout = BufWriter::new(io::stdout().lock());
            let stats = cmd_score_stream(&bundle, mask, stdin, &mut stdout)?;
            stdout.flush().map_err(|e| Error::io("<stdout>", e))?;
            eprintln!(
                "{} ticks scored, {} malformed lines skipped, {} ticks dropped",
                stats.records, stats.malformed, stats.dropped_ticks
            );
            eprintln!("{}", stats.latency);
        }
        Command::Ablate { cfg, manifest, mask, out } => {
            let masks = if mask.is_empty() {
                ModalityMask::ablation_rows().to_vec()
            } else {
                mask
            };
            let result = cmd_ablate(&cfg.load()?, &manifest, &masks, &out)?;
            print!("{}", result.table);
        }
        Command::Replay { episode } => replay(&episode)?,
        Command::Config { cfg } => print!("{}", cfg.load()?.to_toml()?),
    }
    Ok(())
}

fn replay(dir: &Path) -> Result<()> {
    let (streams, _) = read_episode(dir)?;
    let mut out = BufWriter::new(io::stdout().lock());
    for frame in streams.interleaved() {
        writeln!(out, "{}", format_frame_ndjson(frame)).map_err(|e| Error::io("<stdout>", e))?;
    }
    out.flush().map_err(|e| Error::io("<stdout>", e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
