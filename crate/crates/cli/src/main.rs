//! `diffant` command-line front end.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffant::config::{InferMode, Renoise, RunConfig};
use diffant::Error;

#[derive(Parser, Debug)]
#[command(
    name = "diffant",
    version,
    about = "Diffusion-based long-term action anticipation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `section.key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.queries=8`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic grammar dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Anticipate futures for every video of a split.
    Anticipate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        keep_intermediate: bool,
        /// Noise for stochastic re-noising: a new draw per step or one per sample.
        #[arg(long, value_enum)]
        renoise: Option<RenoiseArg>,
    },
    /// Score a prediction dump.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_enum, default_value = "moc")]
        protocol: Protocol,
        /// Sample counts for the diversity protocols, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "5,10,25")]
        m: Vec<usize>,
    },
    /// Render a curve CSV or a prediction timeline as SVG.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        /// CSV whose first column is the x axis (curve).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Frame dump (timeline).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Dataset directory holding ground truth (timeline).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        video: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Deterministic,
    Stochastic,
}

impl From<ModeArg> for InferMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Deterministic => InferMode::Deterministic,
            ModeArg::Stochastic => InferMode::Stochastic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RenoiseArg {
    Fresh,
    Shared,
}

impl From<RenoiseArg> for Renoise {
    fn from(r: RenoiseArg) -> Self {
        match r {
            RenoiseArg::Fresh => Renoise::Fresh,
            RenoiseArg::Shared => Renoise::Shared,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Moc,
    Map,
    DivAvg,
    DivTop1,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlotKind {
    Curve,
    Timeline,
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        if k.trim() == "data.profile" {
            let mut fresh = RunConfig::profile(v.trim())?;
            fresh.seed = cfg.seed;
            cfg = fresh;
        } else {
            cfg.set(k.trim(), v.trim())?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("DIFFANT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::config(
            "DIFFANT_THREADS",
            format!("expected a positive integer, got `{raw}`"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("DIFFANT_THREADS", e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::Train {
            data,
            out,
            log,
            split,
        } => {
            let log = log.unwrap_or_else(|| commands::sibling(&out, "log"));
            commands::train(&cfg, &data, &split, &out, &log)
        }
        Command::Anticipate {
            checkpoint,
            data,
            split,
            out,
            mode,
            steps,
            samples,
            alpha,
            keep_intermediate,
            renoise,
        } => commands::anticipate(&commands::AnticipateArgs {
            checkpoint,
            data,
            split,
            out,
            mode: mode.map(Into::into),
            steps,
            samples,
            alpha,
            keep_intermediate,
            renoise: renoise.map(Into::into),
            seed: cli.common.seed,
        }),
        Command::Eval {
            data,
            split,
            predictions,
            out,
            alpha,
            beta,
            protocol,
            m,
        } => commands::eval(
            &cfg,
            &commands::EvalArgs {
                data,
                split,
                predictions,
                out,
                alpha: alpha.unwrap_or(cfg.eval.alpha),
                beta: beta.unwrap_or(cfg.eval.beta),
                protocol,
                m,
            },
        ),
        Command::Plot {
            kind,
            out,
            input,
            predictions,
            data,
            video,
        } => match kind {
            PlotKind::Curve => {
                let input =
                    input.ok_or_else(|| Error::config("--input", "required for curve plots"))?;
                plot::curve(&input, &out)
            }
            PlotKind::Timeline => {
                let predictions = predictions
                    .ok_or_else(|| Error::config("--predictions", "required for timeline plots"))?;
                let data =
                    data.ok_or_else(|| Error::config("--data", "required for timeline plots"))?;
                plot::timeline(&cfg, &predictions, &data, video.as_deref(), &out)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
