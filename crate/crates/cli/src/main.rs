use std::path::PathBuf;
use std::process::ExitCode;

use branchnet_cli::run::{deterministic_from_env, run, Command, RunOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "branchnet", version, about = "Train and evaluate networks with in-network augmentation branches")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Train one model per seed; writes checkpoints and metrics.csv.
    Train(Common),
    /// Evaluate saved or random weights on the test split; writes eval.csv.
    Eval(Common),
    /// Sweep a transform over spots; writes impact.csv.
    Impact(Common),
    /// Time named configurations against vanilla; writes timing.csv.
    Bench(Common),
    /// Materialize the configured dataset as train.brnet and test.brnet.
    GenData(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Device {
    Cpu,
}

#[derive(Args)]
struct Common {
    /// Config file, or a preset name (cifar100-preact110, imagenet-resnet18).
    #[arg(long)]
    config: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to load, or "random".
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, value_enum, default_value = "cpu")]
    device: Device,
    /// Worker threads; 0 uses every core. Ignored in deterministic mode.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, c) = match cli.command {
        Sub::Train(c) => (Command::Train, c),
        Sub::Eval(c) => (Command::Eval, c),
        Sub::Impact(c) => (Command::Impact, c),
        Sub::Bench(c) => (Command::Bench, c),
        Sub::GenData(c) => (Command::GenData, c),
    };
    let Device::Cpu = c.device;
    let opts = RunOptions {
        config: c.config,
        out: c.out,
        seed: c.seed,
        weights: c.weights,
        threads: c.threads,
        deterministic: deterministic_from_env(),
    };
    match run(cmd, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "kind": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::from(if e.kind() == "config" { 2 } else { 1 })
        }
    }
}
