//! Command-line entry point. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::LoadedConfig;
use crate::coref_eval::{emit_report, ReportFormat};
use crate::error::{Error, Result};
use crate::pipeline::{self, Direction};
use crate::synth::{write_world, WorldConfig};
use crate::trainer::Ablation;

#[derive(Debug, Parser)]
#[command(name = "mmevent", version, about = "Multimedia event extraction pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config field, e.g. `--set optimizer.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<LoadedConfig> {
        LoadedConfig::from_file(&self.config, &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate images for textual events and captions for training images.
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directions to run (default: both).
        #[arg(long = "direction", value_name = "text2img|img2txt")]
        directions: Vec<Direction>,
        /// Cache directory (default: augmentation.cache).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run the staged training schedule.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// combined, one-round, no-augmentation or no-adapter.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Stop after this stage.
        #[arg(long)]
        stage: Option<usize>,
    },
    /// Predict events with a bundle.json or a single checkpoint.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Multimedia documents (JSON lines).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge and score predictions against gold.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Gold documents (default: data.eval).
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Write the JSON report (and its manifest) here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Row label used by `report` comparisons.
        #[arg(long)]
        label: Option<String>,
    },
    /// Score predictions over a grid of merge thresholds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        /// Only merge.threshold can be swept.
        #[arg(long, default_value = "merge.threshold")]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        grid: Vec<f64>,
    },
    /// Render eval manifests: one gives the full table, several a comparison.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Write a synthetic world (data, fixtures and a config) for the toy backend.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        train_docs: usize,
        #[arg(long, default_value_t = 10)]
        heldout_docs: usize,
        /// Probability that a depicted event uses its ambiguous trigger.
        #[arg(long)]
        ambiguous_rate: Option<f64>,
        /// Probability that an event is depicted by an image.
        #[arg(long)]
        depicted_rate: Option<f64>,
        /// Probability that a document carries an event-less image.
        #[arg(long)]
        background_rate: Option<f64>,
    },
}

fn gold_path(cfg: &LoadedConfig, gold: Option<PathBuf>) -> Result<PathBuf> {
    match gold {
        Some(g) => Ok(g),
        None => cfg
            .config
            .data
            .eval
            .as_ref()
            .map(|p| cfg.resolve(p))
            .ok_or_else(|| Error::Config("no --gold given and data.eval is unset".into())),
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let w = |out: &mut dyn Write, s: &str| -> Result<()> {
        out.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))
    };
    match cmd {
        Command::Augment { cfg, directions, cache } => {
            let cfg = cfg.load()?;
            let dirs = if directions.is_empty() {
                vec![Direction::Text2Img, Direction::Img2Txt]
            } else {
                directions
            };
            let m = pipeline::augment(&cfg, &dirs, cache.as_deref())?;
            w(
                out,
                &format!(
                    "{} images, {} captions, {} new cache entries\n",
                    m.images, m.captions, m.cache_writes
                ),
            )
        }
        Command::Train { cfg, ablation, stage } => {
            let cfg = cfg.load()?;
            let m = pipeline::train(&cfg, ablation, stage)?;
            for r in &m.substages {
                w(
                    out,
                    &format!("{:<32} steps {:>5}  loss {:.4}\n", r.name, r.steps, r.final_loss),
                )?;
            }
            w(out, &format!("manifest: {}\n", m.dir.join("manifest.json").display()))
        }
        Command::Predict {
            cfg,
            checkpoint,
            input,
            out: dest,
        } => {
            let cfg = cfg.load()?;
            let m = pipeline::predict(&cfg, &checkpoint, &input, &dest)?;
            w(out, &format!("{} documents -> {}\n", m.documents, m.output.display()))
        }
        Command::Eval {
            cfg,
            gold,
            pred,
            threshold,
            report,
            format,
            label,
        } => {
            let cfg = cfg.load()?;
            let gold = gold_path(&cfg, gold)?;
            let m = pipeline::eval(&cfg, &gold, &pred, threshold, report.as_deref(), label.as_deref())?;
            w(out, &emit_report(&m.report, format)?)
        }
        Command::Sweep {
            cfg,
            gold,
            pred,
            param,
            grid,
        } => {
            if param != "merge.threshold" {
                return Err(Error::Config(format!(
                    "cannot sweep `{param}`; only merge.threshold is supported"
                )));
            }
            let cfg = cfg.load()?;
            let gold = gold_path(&cfg, gold)?;
            let r = pipeline::run_sweep(&cfg, &gold, &pred, &grid)?;
            w(out, &pipeline::render_sweep(&r))
        }
        Command::Report { manifests } => {
            let ms = manifests
                .iter()
                .map(|p| pipeline::read_eval_manifest(p))
                .collect::<Result<Vec<_>>>()?;
            w(out, &pipeline::render_report(&ms)?)
        }
        Command::Synth {
            out: dir,
            seed,
            train_docs,
            heldout_docs,
            ambiguous_rate,
            depicted_rate,
            background_rate,
        } => {
            let d = WorldConfig::default();
            let wc = WorldConfig {
                seed,
                train_docs,
                heldout_docs,
                ambiguous_rate: ambiguous_rate.unwrap_or(d.ambiguous_rate),
                depicted_rate: depicted_rate.unwrap_or(d.depicted_rate),
                background_rate: background_rate.unwrap_or(d.background_rate),
                ..d
            };
            let files = write_world(&dir, &wc)?;
            w(out, &format!("config: {}\n", files.config.display()))
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
