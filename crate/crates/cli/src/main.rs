//! `idfe`: synthesize corpora, prepare audio, train, evaluate and probe.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use idfe::config::Settings;
use idfe::Error;

#[derive(Parser, Debug)]
#[command(name = "idfe", version, about = "Domain-adversarial spoofing detection over layer-stack embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory. Defaults to runs/<command>-<config hash>-<unix time>.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed; overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate biased synthetic training and evaluation corpora.
    Synth,
    /// Trim, augment and segment WAV files.
    Prep,
    /// Train a detector; domain-adversarial when alpha > 0.
    Train,
    /// Score a manifest and report EER per domain and pooled.
    Eval,
    /// Measure how well a linear probe recovers the domain from embeddings.
    Probe,
    /// Write pooled embeddings of a manifest as TSV.
    ExportEmb,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Prep => "prep",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Probe => "probe",
            Command::ExportEmb => "export-emb",
        }
    }
}

fn settings(cli: &Cli) -> idfe::Result<Settings> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for o in &cli.set {
        s.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        s.set("seed", &seed.to_string())?;
    }
    s.validate()?;
    Ok(s)
}

fn init_threads() -> idfe::Result<()> {
    let Ok(v) = std::env::var("IDFE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("IDFE_THREADS = {v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::State(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> idfe::Result<()> {
    init_threads()?;
    let s = settings(cli)?;
    let out = commands::prepare_out(cli.out.as_deref(), cli.command.name(), &s)?;
    match cli.command {
        Command::Synth => commands::synth(&s, &out),
        Command::Prep => commands::prep(&s, &out),
        Command::Train => commands::train(&s, &out),
        Command::Eval => commands::eval(&s, &out),
        Command::Probe => commands::probe(&s, &out),
        Command::ExportEmb => commands::export_emb(&s, &out),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 3,
        e if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("idfe {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
