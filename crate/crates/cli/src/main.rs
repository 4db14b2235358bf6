use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gfss_cli::{run, Command};
use gfss_core::config::RunConfig;

#[derive(Parser)]
#[command(name = "gfss", version, about = "Generalized few-shot segmentation on synthetic feature worlds")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialise a world: prototypes, evaluation images, supports.
    Synth(Common),
    /// Train base kernels and the foreground branch on `paths.data`.
    Train(Common),
    /// Add a session of novel classes to a registry.
    Register(Common),
    /// Segment the feature maps in `paths.features`.
    Infer(Common),
    /// Score predictions (or a model) on the dataset's evaluation images.
    Eval(Common),
    /// Register novel classes session by session, evaluating after each.
    Cifss(Common),
    /// Evaluate inference-time component toggles of one model.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file of settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shorthand for `--set seed=N`; `--set` entries win.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
    /// Override one setting, e.g. `--set train.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::Synth(c) => (Command::Synth, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Register(c) => (Command::Register, c),
        Cmd::Infer(c) => (Command::Infer, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Cifss(c) => (Command::Cifss, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
    };
    let mut overrides: Vec<String> = common.seed.map(|s| format!("seed={}", s)).into_iter().collect();
    overrides.extend(common.sets);
    let result = RunConfig::resolve(common.config.as_deref(), &overrides).and_then(|cfg| run(cmd, &cfg, &common.out));
    match result {
        Ok(text) => {
            print!("{}", text);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gfss: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
