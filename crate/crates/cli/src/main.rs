use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use quavf_core::pipeline::{ModelKind, Pipeline, PipelineConfig, WorkDirLock};
use quavf_core::Error;

#[derive(Debug, Parser)]
#[command(name = "quavf", version, about = "Quality-aware audio-visual talking-to-me pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a dotted config key, e.g. `--set eval.window=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed for generation, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Audio,
    Vision,
    Avjoint,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Audio => ModelKind::Audio,
            ModelArg::Vision => ModelKind::Vision,
            ModelArg::Avjoint => ModelKind::AvJoint,
        }
    }
}

fn odd_window(s: &str) -> Result<usize, String> {
    let w: usize = s.parse().map_err(|e| format!("{e}"))?;
    if w == 0 || w.is_multiple_of(2) {
        return Err(format!("window must be odd and at least 1, got {w}"));
    }
    Ok(w)
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Compute per-frame and per-window face quality.
    Quality,
    /// Train one model, or all three when --model is omitted.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Score the validation segments with one model, or all three.
    Predict {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Quality-weighted fusion of the audio and vision scores.
    Fuse,
    /// Accuracy and mAP of every scored system on the validation split.
    Eval {
        /// Moving-average window (odd).
        #[arg(long, value_parser = odd_window)]
        window: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Comparison table of evaluated systems.
    Report,
    /// Run every stage.
    All,
}

fn models(m: Option<ModelArg>) -> Vec<ModelKind> {
    m.map_or_else(|| ModelKind::ALL.to_vec(), |m| vec![m.into()])
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Eval { window, threshold } = &cli.command {
        if let Some(w) = window {
            cfg.eval.window = *w;
        }
        if let Some(t) = threshold {
            cfg.eval.threshold = *t;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, pipeline: &Pipeline) -> Result<(), Error> {
    let _lock = WorkDirLock::acquire(&pipeline.work_dir)?;
    match &cli.command {
        Command::Synth => pipeline.synth(),
        Command::Quality => pipeline.quality(),
        Command::Train { model } => {
            for m in models(*model) {
                let curve = pipeline.train(m)?;
                if let Some(last) = curve.last() {
                    println!("{}: final epoch loss {last:.5}", m.name());
                }
            }
            Ok(())
        }
        Command::Predict { model } => models(*model).into_iter().try_for_each(|m| pipeline.predict(m)),
        Command::Fuse => pipeline.fuse(),
        Command::Eval { .. } => {
            for e in pipeline.eval()? {
                println!("{} (raw)\n{}", e.system, e.raw.to_table());
                println!("{} (smoothed)\n{}", e.system, e.smoothed.to_table());
            }
            Ok(())
        }
        Command::Report => {
            print!("{}", pipeline.report()?);
            Ok(())
        }
        Command::All => {
            print!("{}", pipeline.all()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let pipeline = match Pipeline::new(cfg) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &pipeline) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
